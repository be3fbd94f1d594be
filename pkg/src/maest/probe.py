"""Downstream evaluation: track-level embeddings from half-overlapped
segments, the 512-unit MLP probe with its grid search, and macro ROC-AUC/mAP.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DegenerateMetric, EmptyInput, FormatError
from .melfront import MelSpectrogram, NormStats, SpectrogramStore, normalize
from .model import Embedding, EmbeddingSpec, Maest, _sigmoid
from .patchgrid import PatchoutSpec


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    roc_auc: float
    map: float
    n_labels_counted: int
    skipped_labels: list[int] = field(default_factory=list)


def _rankdata(x: NDArray) -> NDArray:
    """Average ranks (1-based), ties share the mean of their rank span."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc_single(scores: NDArray, labels: NDArray) -> float:
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    ranks = _rankdata(scores)
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _ap_single(scores: NDArray, labels: NDArray) -> float:
    """Precision at each positive, averaged; the cutoff at score s includes
    every item scoring >= s (tie-robust)."""
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order] > 0
    cum_pos = np.cumsum(y_sorted)
    total = np.arange(1, len(scores) + 1)
    # cutoff for each item = last index of its tie group
    last_of_group = np.ones(len(scores), dtype=bool)
    last_of_group[:-1] = s_sorted[:-1] != s_sorted[1:]
    group_end = np.empty(len(scores), dtype=np.int64)
    end = len(scores) - 1
    for i in range(len(scores) - 1, -1, -1):
        if last_of_group[i]:
            end = i
        group_end[i] = end
    precisions = cum_pos[group_end] / total[group_end]
    return float(precisions[y_sorted].mean())


def _per_label(scores: NDArray, labels: NDArray, fn) -> tuple[float, int, list[int]]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = scores[:, None]
        labels = labels[:, None]
    values = []
    skipped = []
    for l in range(labels.shape[1]):
        col = labels[:, l]
        n_pos = int((col > 0).sum())
        if n_pos == 0 or n_pos == len(col):
            skipped.append(l)
            continue
        values.append(fn(scores[:, l], col))
    if not values:
        raise DegenerateMetric("no label had both positive and negative examples")
    return float(np.mean(values)), len(values), skipped


def roc_auc_macro(scores: NDArray, labels: NDArray) -> float:
    """Macro-averaged ROC-AUC (rank statistic, average ranks for ties)."""
    value, _, _ = _per_label(scores, labels, _auc_single)
    return value


def map_macro(scores: NDArray, labels: NDArray) -> float:
    """Macro-averaged average precision."""
    value, _, _ = _per_label(scores, labels, _ap_single)
    return value


def compute_metrics(scores: NDArray, labels: NDArray) -> MetricReport:
    auc, counted, skipped = _per_label(scores, labels, _auc_single)
    ap, _, _ = _per_label(scores, labels, _ap_single)
    return MetricReport(roc_auc=auc, map=ap, n_labels_counted=counted, skipped_labels=skipped)


# ---------------------------------------------------------------------------
# Track embeddings
# ---------------------------------------------------------------------------

def segment_offsets(frames: int, seg_frames: int) -> list[int]:
    """Half-overlapped segment start offsets covering the whole track.

    Hop is floor(seg/2); a track shorter than one segment yields a single
    zero offset (the segment is right-padded downstream).
    """
    if seg_frames < 1:
        raise ConfigError("seg_frames must be >= 1")
    if frames < seg_frames:
        return [0]
    hop = max(1, seg_frames // 2)
    return list(range(0, frames - seg_frames + 1, hop))


def _segment(spec: MelSpectrogram, offset: int, seg_frames: int) -> MelSpectrogram:
    data = spec.data[:, offset : offset + seg_frames]
    if data.shape[1] < seg_frames:
        padded = np.zeros((spec.band_count, seg_frames), dtype=spec.data.dtype)
        padded[:, : data.shape[1]] = data
        data = padded
    return MelSpectrogram(data=data, hop_ms=spec.hop_ms)


def track_embedding(spec: MelSpectrogram, model: Maest, espec: EmbeddingSpec,
                    seg_frames: int, patchout: PatchoutSpec | None = None) -> Embedding:
    """Mean of per-segment embeddings over half-overlapped segments."""
    vectors = []
    for off in segment_offsets(spec.frame_count, seg_frames):
        emb = model.extract_embedding(_segment(spec, off, seg_frames), espec, patchout)
        vectors.append(emb.vector.astype(np.float64))
    mean = np.mean(vectors, axis=0).astype(np.float32)
    return Embedding(vector=mean, espec=str(espec), model_id=model.model_id())


# ---------------------------------------------------------------------------
# Embedding datasets
# ---------------------------------------------------------------------------

SPLITS = ("train", "valid", "test")


@dataclass
class EmbeddingDataset:
    """Track-level embeddings with multi-hot labels, split into train/valid/test."""

    embeddings: dict[str, NDArray]  # split -> [n, dim] float32
    labels: dict[str, NDArray]      # split -> [n, n_labels] uint8
    ids: dict[str, list[str]]
    espec: str
    model_id: str

    def __post_init__(self):
        dims = {v.shape[1] for v in self.embeddings.values() if len(v)}
        if len(dims) > 1:
            raise ConfigError(f"inconsistent embedding dims: {sorted(dims)}")
        seen: set[str] = set()
        for split, split_ids in self.ids.items():
            overlap = seen & set(split_ids)
            if overlap:
                raise ConfigError(f"track ids in multiple splits: {sorted(overlap)[:5]}")
            seen |= set(split_ids)

    @property
    def dim(self) -> int:
        return next(iter(self.embeddings.values())).shape[1]

    @property
    def n_labels(self) -> int:
        return next(iter(self.labels.values())).shape[1]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "espec": self.espec,
            "model_id": self.model_id,
            "dim": self.dim,
            "n_labels": self.n_labels,
            "splits": {s: len(self.ids[s]) for s in self.ids},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        for split in self.ids:
            emb = np.ascontiguousarray(self.embeddings[split], dtype="<f4")
            (directory / f"{split}.f32").write_bytes(emb.tobytes(order="C"))
            lab = np.ascontiguousarray(self.labels[split], dtype=np.uint8)
            (directory / f"{split}.labels.u8").write_bytes(lab.tobytes(order="C"))
            (directory / f"{split}.ids.txt").write_text(
                "".join(f"{t}\n" for t in self.ids[split])
            )

    @classmethod
    def load(cls, directory) -> "EmbeddingDataset":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FormatError(f"no manifest.json under {directory}")
        manifest = json.loads(manifest_path.read_text())
        dim = int(manifest["dim"])
        n_labels = int(manifest["n_labels"])
        embeddings, labels, ids = {}, {}, {}
        for split, count in manifest["splits"].items():
            raw = (directory / f"{split}.f32").read_bytes()
            if len(raw) != count * dim * 4:
                raise FormatError(f"{split}.f32 has {len(raw)} bytes, expected {count * dim * 4}")
            embeddings[split] = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
            raw = (directory / f"{split}.labels.u8").read_bytes()
            if len(raw) != count * n_labels:
                raise FormatError(f"{split}.labels.u8 truncated")
            labels[split] = np.frombuffer(raw, dtype=np.uint8).reshape(count, n_labels).copy()
            id_text = (directory / f"{split}.ids.txt").read_text()
            ids[split] = [l for l in id_text.splitlines() if l]
            if len(ids[split]) != count:
                raise FormatError(f"{split}.ids.txt has {len(ids[split])} ids, expected {count}")
        return cls(embeddings=embeddings, labels=labels, ids=ids,
                   espec=manifest["espec"], model_id=manifest["model_id"])


def build_embedding_dataset(store: SpectrogramStore, splits: dict[str, list[str]],
                            model: Maest, espec: EmbeddingSpec, stats: NormStats,
                            seg_frames: int, patchout: PatchoutSpec | None = None,
                            label_vocab: list[int] | None = None) -> EmbeddingDataset:
    """Extract per-track embeddings for every split of a store."""
    if label_vocab is None:
        all_labels = sorted({l for t in store.track_ids() for l in store.labels(t)})
        label_vocab = all_labels
    label_pos = {l: i for i, l in enumerate(label_vocab)}
    embeddings, labels, ids = {}, {}, {}
    dim = espec.output_dim(model.cfg.d)
    for split, split_ids in splits.items():
        emb = np.zeros((len(split_ids), dim), dtype=np.float32)
        lab = np.zeros((len(split_ids), len(label_vocab)), dtype=np.uint8)
        for row, tid in enumerate(split_ids):
            spec = normalize(store.read(tid), stats)
            emb[row] = track_embedding(spec, model, espec, seg_frames, patchout).vector
            for l in store.labels(tid):
                if l in label_pos:
                    lab[row, label_pos[l]] = 1
        embeddings[split] = emb
        labels[split] = lab
        ids[split] = list(split_ids)
    return EmbeddingDataset(embeddings=embeddings, labels=labels, ids=ids,
                            espec=str(espec), model_id=model.model_id())


# ---------------------------------------------------------------------------
# MLP probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 512
    dropout: float = 0.5
    batch: int = 128
    epochs: int = 30
    lr_max: float = 1e-4
    lr_start: float = 1e-7
    lr_end: float = 1e-7
    rise_epochs: int = 10
    fall_epochs: int = 10
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


# Paper-fidelity search space: 3 x 6 x 2 x 4 = 144 combinations.
DEFAULT_GRID = {
    "batch": (64, 128, 256),
    "epochs": (30, 40, 50, 60, 70, 80),
    "dropout": (0.5, 0.75),
    "lr_max": (1e-3, 5e-4, 1e-4, 1e-5),
}


def probe_lr_at(epoch: float, cfg: ProbeConfig) -> float:
    """Exponential rise to lr_max, plateau, linear decay to lr_end."""
    rise = min(cfg.rise_epochs, max(1, cfg.epochs // 2))
    fall_start = max(cfg.epochs - cfg.fall_epochs, rise)
    if epoch < rise:
        frac = epoch / rise
        return float(cfg.lr_max ** frac * cfg.lr_start ** (1.0 - frac))
    if epoch < fall_start:
        return cfg.lr_max
    span = cfg.epochs - fall_start
    frac = (epoch - fall_start) / span if span > 0 else 1.0
    return float(cfg.lr_max + min(frac, 1.0) * (cfg.lr_end - cfg.lr_max))


def mlp_init(din: int, hidden: int, n_labels: int, rng) -> dict[str, NDArray]:
    """He-scaled hidden layer; zero output layer so epoch 0 predicts 0.5."""
    return {
        "fc1.weight": (rng.normal(0.0, np.sqrt(2.0 / din), size=(din, hidden))).astype(np.float32),
        "fc1.bias": np.zeros(hidden, dtype=np.float32),
        "fc2.weight": np.zeros((hidden, n_labels), dtype=np.float32),
        "fc2.bias": np.zeros(n_labels, dtype=np.float32),
    }


def mlp_forward(x: NDArray, weights: dict[str, NDArray], dropout: float = 0.0, rng=None):
    """Logits of the probe; inverted dropout when a rate and rng are given."""
    h = np.maximum(x @ weights["fc1.weight"] + weights["fc1.bias"], 0.0)
    mask = None
    if dropout > 0.0 and rng is not None:
        mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = h * mask
    logits = h @ weights["fc2.weight"] + weights["fc2.bias"]
    return logits, (x, h, mask)


def _mlp_backward(dlogits, cache, weights):
    x, h, mask = cache
    grads = {
        "fc2.weight": h.T @ dlogits,
        "fc2.bias": dlogits.sum(axis=0),
    }
    dh = dlogits @ weights["fc2.weight"].T
    if mask is not None:
        dh = dh * mask
    dh = dh * (h > 0)
    grads["fc1.weight"] = x.T @ dh
    grads["fc1.bias"] = dh.sum(axis=0)
    return grads


def mlp_fit(dataset: EmbeddingDataset, cfg: ProbeConfig, seed: int = 0):
    """Train the probe; select the epoch with the best validation ROC-AUC.

    Returns (weights at the best epoch, MetricReport on test, history rows).
    """
    from .train import AdamState, adam_step, bce_grad, bce_loss  # local to avoid cycle

    for split in SPLITS:
        if split not in dataset.embeddings:
            raise ConfigError(f"dataset is missing the {split} split")
    rng = np.random.default_rng(seed)
    x_train = dataset.embeddings["train"].astype(np.float32)
    y_train = dataset.labels["train"].astype(np.float32)
    weights = mlp_init(dataset.dim, cfg.hidden, dataset.n_labels, rng)
    adam = AdamState()
    best = (-1.0, None, -1)  # (val auc, weights, epoch)
    history = []
    n = len(x_train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        n_batches = max(1, int(np.ceil(n / cfg.batch)))
        for bi in range(n_batches):
            rows = order[bi * cfg.batch : (bi + 1) * cfg.batch]
            if len(rows) == 0:
                continue
            logits, cache = mlp_forward(x_train[rows], weights, cfg.dropout, rng)
            losses.append(bce_loss(logits, y_train[rows]))
            grads = _mlp_backward(bce_grad(logits, y_train[rows]), cache, weights)
            adam_step(weights, grads, adam, probe_lr_at(epoch + bi / n_batches, cfg),
                      cfg.weight_decay)
        val_logits, _ = mlp_forward(dataset.embeddings["valid"].astype(np.float32), weights)
        try:
            val_auc = roc_auc_macro(_sigmoid(val_logits), dataset.labels["valid"])
        except DegenerateMetric:
            val_auc = float("nan")
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_roc_auc": val_auc})
        if np.isfinite(val_auc) and val_auc > best[0]:
            best = (val_auc, {k: v.copy() for k, v in weights.items()}, epoch)
    if best[1] is None:
        raise DegenerateMetric("validation ROC-AUC never computable")
    best_weights = best[1]
    test_logits, _ = mlp_forward(dataset.embeddings["test"].astype(np.float32), best_weights)
    report = compute_metrics(_sigmoid(test_logits), dataset.labels["test"])
    return best_weights, report, history


def grid_search(dataset: EmbeddingDataset, space: dict | None = None,
                base: ProbeConfig | None = None, seed: int = 0):
    """Train every combination; the winner has the highest validation ROC-AUC.

    Returns (best config, test MetricReport of the winner, per-combination rows).
    """
    space = DEFAULT_GRID if space is None else space
    base = base or ProbeConfig()
    if not space:
        raise ConfigError("empty grid-search space")
    keys = sorted(space)
    rows = []
    best = None
    for combo in itertools.product(*(space[k] for k in keys)):
        cfg = replace(base, **dict(zip(keys, combo)))
        _, report, history = mlp_fit(dataset, cfg, seed=seed)
        val_auc = max((h["val_roc_auc"] for h in history if np.isfinite(h["val_roc_auc"])),
                      default=float("nan"))
        row = {k: v for k, v in zip(keys, combo)}
        row.update({"val_roc_auc": val_auc, "test_roc_auc": report.roc_auc, "test_map": report.map})
        rows.append(row)
        if best is None or (np.isfinite(val_auc) and val_auc > best[0]):
            best = (val_auc, cfg, report)
    return best[1], best[2], rows
