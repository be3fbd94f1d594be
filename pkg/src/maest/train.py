"""Supervised training: BCE objective, mixup, SpecAugment, balanced sampling,
the warmup/plateau/linear-decay schedule, Adam with decoupled decay, and SWA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DegenerateMetric, EmptyInput, ShapeError, ShapeMismatch
from .melfront import MelSpectrogram, NormStats, SpectrogramStore, compute_stats, normalize
from .model import Maest, ModelConfig, _sigmoid, init_weights
from .patchgrid import PatchoutSpec, grid_dims, slice_patches
from .probe import compute_metrics


@dataclass(frozen=True)
class SpecAugmentConfig:
    max_t_groups: int = 20
    t_width: int = 8
    max_f_groups: int = 5
    f_width: int = 8


@dataclass
class TrainConfig:
    epochs: int = 130
    warmup_epochs: float = 5.0
    plateau_end_epoch: float = 50.0
    decay_epochs: float = 50.0
    lr_peak: float = 1e-4
    lr_floor: float = 1e-7
    weight_decay: float = 1e-4
    mixup_alpha: float = 0.3
    specaug: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    patchout: PatchoutSpec = field(default_factory=lambda: PatchoutSpec.training(3, 15))
    epoch_sample: int = 200_000
    batch_size: int = 12
    seg_frames: int = 311  # frames per training segment (5 s at the 16 ms hop)
    swa_start_epoch: int = 50
    swa_interval: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_epochs < self.plateau_end_epoch:
            raise ConfigError("warmup must end before the plateau does")
        if not self.lr_floor < self.lr_peak:
            raise ConfigError("lr_floor must be below lr_peak")


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Piecewise-linear schedule: ramp to peak, plateau, decay to the floor.

    Continuous in epoch with breakpoints at warmup end, plateau end, and
    plateau end + decay length; constant at the floor afterwards.
    """
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_peak * epoch / cfg.warmup_epochs
    if epoch <= cfg.plateau_end_epoch:
        return cfg.lr_peak
    decay_end = cfg.plateau_end_epoch + cfg.decay_epochs
    if epoch >= decay_end:
        return cfg.lr_floor
    frac = (epoch - cfg.plateau_end_epoch) / cfg.decay_epochs
    return cfg.lr_peak + frac * (cfg.lr_floor - cfg.lr_peak)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def mixup(batch_x: NDArray, batch_y: NDArray, alpha: float, rng, lam: float | None = None):
    """Convex combination of the batch with a random permutation of itself.

    One Beta(alpha, alpha) coefficient per call; batches of one pass through.
    `lam` overrides the draw (test hook).
    """
    b = batch_x.shape[0]
    if b < 2:
        return batch_x, batch_y
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(b)
    mixed_x = lam * batch_x + (1.0 - lam) * batch_x[perm]
    mixed_y = lam * batch_y + (1.0 - lam) * batch_y[perm]
    return mixed_x, mixed_y


def spec_augment(spec_data: NDArray, cfg: SpecAugmentConfig, rng, return_groups: bool = False):
    """Mask random contiguous time/frequency spans with zeros, on a copy.

    Group counts are uniform draws from {0..max}; each group is a full-width
    span starting at a uniform offset. Zero is the post-normalization mean.
    """
    out = np.array(spec_data, copy=True)
    bands, frames = out.shape
    groups = []
    n_t = int(rng.integers(0, cfg.max_t_groups + 1))
    n_f = int(rng.integers(0, cfg.max_f_groups + 1))
    if frames >= cfg.t_width:
        for _ in range(n_t):
            start = int(rng.integers(0, frames - cfg.t_width + 1))
            out[:, start : start + cfg.t_width] = 0.0
            groups.append(("time", start, cfg.t_width))
    if bands >= cfg.f_width:
        for _ in range(n_f):
            start = int(rng.integers(0, bands - cfg.f_width + 1))
            out[start : start + cfg.f_width, :] = 0.0
            groups.append(("freq", start, cfg.f_width))
    if return_groups:
        return out, groups
    return out


# ---------------------------------------------------------------------------
# Balanced sampling
# ---------------------------------------------------------------------------

@dataclass
class LabelStats:
    """Per-label frequency counts over a training corpus."""

    freq: dict[int, int]

    def __post_init__(self):
        bad = [l for l, c in self.freq.items() if c < 1]
        if bad:
            raise ConfigError(f"labels with zero frequency: {bad}")

    def track_weight(self, labels) -> float:
        """Sum of inverse label frequencies (multi-label reduction)."""
        return sum(1.0 / self.freq[l] for l in labels)


def compute_label_stats(track_labels: dict[str, list[int]]) -> LabelStats:
    freq: dict[int, int] = {}
    for labels in track_labels.values():
        for l in labels:
            freq[l] = freq.get(l, 0) + 1
    return LabelStats(freq=freq)


def balanced_sample(track_labels: dict[str, list[int]], stats: LabelStats, n: int, rng) -> list[str]:
    """Weighted sample of n distinct tracks, inverse-label-frequency weighted.

    Efraimidis–Spirakis exponential keys: distribution identical to
    sequential draw-and-remove with probability proportional to weight.
    """
    ids = sorted(track_labels)
    if n > len(ids):
        raise ConfigError(f"cannot sample {n} from a corpus of {len(ids)}")
    weights = np.array([stats.track_weight(track_labels[t]) for t in ids])
    u = rng.random(len(ids))
    with np.errstate(divide="ignore"):
        keys = np.log(u) / weights  # weight 0 -> -inf, never drawn before others
    order = np.argsort(-keys, kind="stable")[:n]
    return [ids[i] for i in order]


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def bce_loss(logits: NDArray, targets: NDArray) -> float:
    """Mean binary cross-entropy over all elements, log-sum-exp stable form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs targets {y.shape}")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


def bce_grad(logits: NDArray, targets: NDArray) -> NDArray:
    """d(mean BCE)/d(logits) = (sigmoid(z) - y) / n_elements."""
    return (_sigmoid(logits) - targets) / logits.size


@dataclass
class AdamState:
    m: dict[str, NDArray] = field(default_factory=dict)
    v: dict[str, NDArray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, NDArray], grads: dict[str, NDArray], state: AdamState,
              lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam update with decoupled decay applied after the step."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param {p.shape} vs grad {g.shape}")
        g = g.astype(p.dtype)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p -= lr * weight_decay * p


def loss_and_grads(model: Maest, patches: NDArray, tags, targets: NDArray, dropout_rng=None):
    """BCE loss and gradients for every model tensor on one assembled batch."""
    tokens = model.assemble_batch(patches, tags)
    logits, _, caches = model.forward_batch(tokens, want_caches=True, dropout_rng=dropout_rng)
    loss = bce_loss(logits, targets)
    dlogits = bce_grad(logits, targets.astype(logits.dtype))
    grads, dtokens = model.backward_batch(caches, dlogits)
    grads.update(model.assemble_batch_backward(dtokens, patches, tags))
    return loss, grads


# ---------------------------------------------------------------------------
# Stochastic weight averaging
# ---------------------------------------------------------------------------

@dataclass
class SwaState:
    averaged: dict[str, NDArray]
    n_models: int = 1

    @classmethod
    def start(cls, snapshot: dict[str, NDArray]) -> "SwaState":
        return cls(averaged={k: v.astype(np.float64) for k, v in snapshot.items()})


def swa_update(state: SwaState, snapshot: dict[str, NDArray]) -> SwaState:
    """Fold one snapshot into the running mean: avg += (snap - avg)/(n+1)."""
    if set(state.averaged) != set(snapshot):
        raise ShapeMismatch("snapshot tensor names differ from the averaged set")
    for name, avg in state.averaged.items():
        snap = snapshot[name]
        if snap.shape != avg.shape:
            raise ShapeMismatch(f"{name}: snapshot {snap.shape} vs average {avg.shape}")
        avg += (snap - avg) / (state.n_models + 1)
    state.n_models += 1
    return state


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    weights: dict[str, NDArray]
    swa_weights: dict[str, NDArray] | None
    metrics: list[dict]


def _random_segment(spec: MelSpectrogram, seg_frames: int, rng) -> NDArray:
    frames = spec.frame_count
    if frames <= seg_frames:
        out = np.zeros((spec.band_count, seg_frames), dtype=np.float32)
        out[:, :frames] = spec.data
        return out
    off = int(rng.integers(0, frames - seg_frames + 1))
    return spec.data[:, off : off + seg_frames]


def evaluate(model: Maest, store: SpectrogramStore, ids, stats: NormStats,
             seg_frames: int, label_vocab: list[int]):
    """Center-segment scores for a track list; returns (scores, targets)."""
    from .melfront import center_crop_frames

    label_pos = {l: i for i, l in enumerate(label_vocab)}
    scores = np.zeros((len(ids), len(label_vocab)), dtype=np.float64)
    targets = np.zeros((len(ids), len(label_vocab)), dtype=np.int8)
    for row, tid in enumerate(ids):
        spec = normalize(store.read(tid), stats)
        data = center_crop_frames(spec, seg_frames).data
        grid = slice_patches(MelSpectrogram(data=data, hop_ms=spec.hop_ms), model.cfg.patch)
        keep = [(f, t) for f in range(grid.f_p) for t in range(grid.t_p)]
        logits, _ = model.forward(model.assemble(grid, keep))
        scores[row] = _sigmoid(logits.astype(np.float64))
        for l in store.labels(tid):
            if l in label_pos:
                targets[row, label_pos[l]] = 1
    return scores, targets


def fit(store: SpectrogramStore, cfg: TrainConfig, model_cfg: ModelConfig,
        init: dict[str, NDArray] | None = None, stats: NormStats | None = None) -> FitResult:
    """Train from the spectrogram store; returns final weights, SWA weights,
    and a per-epoch metrics log. Deterministic given cfg.seed (single worker).
    """
    ids = sorted(store.track_ids())
    if not ids:
        raise EmptyInput("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)

    n_val = int(round(len(ids) * cfg.val_fraction))
    perm = rng.permutation(len(ids))
    val_ids = [ids[i] for i in perm[:n_val]]
    train_ids = [ids[i] for i in perm[n_val:]]
    if not train_ids:
        raise EmptyInput("no training tracks after the validation split")

    if stats is None:
        stats = compute_stats(store, train_ids)
    track_labels = {t: store.labels(t) for t in train_ids}
    label_stats = compute_label_stats(track_labels)
    label_vocab = sorted(label_stats.freq)
    if len(label_vocab) > model_cfg.n_labels:
        raise ConfigError(
            f"corpus has {len(label_vocab)} labels but the model head has {model_cfg.n_labels}"
        )
    label_vocab = label_vocab + [-1] * (model_cfg.n_labels - len(label_vocab))
    label_pos = {l: i for i, l in enumerate(label_vocab) if l != -1}

    model = Maest(model_cfg, init if init is not None else init_weights(model_cfg, rng))
    adam = AdamState()
    swa: SwaState | None = None
    bands = model_cfg.patch.patch_h + (model_cfg.f_p_max - 1) * model_cfg.patch.stride_h
    f_p, t_p = grid_dims(bands, cfg.seg_frames, model_cfg.patch)
    if f_p > model_cfg.f_p_max or t_p > model_cfg.t_p_max:
        raise ConfigError(f"segment grid {f_p}x{t_p} exceeds model maximum "
                          f"{model_cfg.f_p_max}x{model_cfg.t_p_max}")

    metrics: list[dict] = []
    for epoch in range(cfg.epochs):
        sample_n = min(cfg.epoch_sample, len(train_ids))
        epoch_ids = balanced_sample(track_labels, label_stats, sample_n, rng)
        n_batches = max(1, len(epoch_ids) // cfg.batch_size)
        losses = []
        for bi in range(n_batches):
            batch_ids = epoch_ids[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            xs = []
            ys = np.zeros((len(batch_ids), model_cfg.n_labels), dtype=np.float32)
            for j, tid in enumerate(batch_ids):
                spec = normalize(store.read(tid), stats)
                seg = _random_segment(spec, cfg.seg_frames, rng)
                xs.append(spec_augment(seg, cfg.specaug, rng))
                for l in store.labels(tid):
                    ys[j, label_pos[l]] = 1.0
            x = np.stack(xs)
            x, ys = mixup(x, ys, cfg.mixup_alpha, rng)
            kept = cfg.patchout.kept_indices(f_p, t_p, rng)
            patch_list = []
            for sample in x:
                grid = slice_patches(MelSpectrogram(data=sample, hop_ms=16), model_cfg.patch)
                patch_list.append(np.stack([grid.patches[f, t] for f, t in kept]))
            patches = np.stack(patch_list)
            tags = [(t, f) for f, t in kept]
            dropout_rng = rng if model_cfg.dropout > 0 else None
            loss, grads = loss_and_grads(model, patches, tags, ys, dropout_rng=dropout_rng)
            lr = lr_at(epoch + bi / n_batches, cfg)
            adam_step(model.weights, grads, adam, lr, cfg.weight_decay)
            losses.append(loss)
        model._model_id = None  # weights changed in place

        completed = epoch + 1
        swa_updated = False
        if completed >= cfg.swa_start_epoch and (completed - cfg.swa_start_epoch) % cfg.swa_interval == 0:
            snapshot = {k: v.copy() for k, v in model.weights.items()}
            swa = SwaState.start(snapshot) if swa is None else swa_update(swa, snapshot)
            swa_updated = True

        entry = {
            "epoch": epoch,
            "lr": lr_at(float(epoch), cfg),
            "train_loss": float(np.mean(losses)),
            "swa": swa_updated,
        }
        if val_ids:
            scores, targets = evaluate(model, store, val_ids, stats, cfg.seg_frames, label_vocab)
            try:
                report = compute_metrics(scores, targets)
                entry["val_roc_auc"] = report.roc_auc
                entry["val_map"] = report.map
            except DegenerateMetric:
                entry["val_roc_auc"] = None
                entry["val_map"] = None
        metrics.append(entry)

    swa_weights = None
    if swa is not None:
        swa_weights = {k: v.astype(np.float32) for k, v in swa.averaged.items()}
    return FitResult(weights=model.weights, swa_weights=swa_weights, metrics=metrics)
