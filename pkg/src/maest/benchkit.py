"""Embedding-extraction throughput under inference patchout.

Measures audio-seconds processed per wall-second for each (T, F) patchout
setting, median over repetitions with IQR, and optionally re-scores a
frozen probe on embeddings re-extracted under each setting.
"""

from __future__ import annotations

import csv
import json
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from threadpoolctl import threadpool_limits

from .errors import ConfigError, EmptyInput
from .melfront import MelConfig, MelSpectrogram, frames_for_duration
from .model import EmbeddingSpec, Maest, _sigmoid
from .patchgrid import PatchoutSpec, grid_dims, slice_patches
from .probe import EmbeddingDataset, map_macro, mlp_fit, mlp_forward, track_embedding


@dataclass
class BenchConfig:
    t_keep_grid: tuple[int, ...] = (1, 2, 3, 5, 10)
    f_rows_grid: tuple[int, ...] = (0, 3, 4)
    repetitions: int = 5
    warmup: int = 1
    threads: int = 1  # 0 -> leave the BLAS pool alone
    segment_s: float = 30.0
    batch: int = 1
    min_time_s: float = 0.02  # below this the batch is grown automatically
    max_batch: int = 64

    def __post_init__(self):
        if self.repetitions < 3:
            raise ConfigError("repetitions must be >= 3")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")


@dataclass
class BenchRow:
    setting: str
    t_keep: int
    f_rows: int
    kept_tokens: int
    throughput: float  # audio-seconds per wall-second, median
    iqr: float
    batch: int
    threads: int
    map: float | None = None


def synthetic_spectrogram(segment_s: float, seed: int = 0, bands: int = 96) -> MelSpectrogram:
    """Standard-normal fake normalized input of the given duration."""
    frames = frames_for_duration(segment_s, MelConfig(n_bands=bands))
    rng = np.random.default_rng(seed)
    return MelSpectrogram(data=rng.normal(0, 1, (bands, frames)).astype(np.float32), hop_ms=16)


def _thread_guard(threads: int):
    return threadpool_limits(limits=threads) if threads > 0 else nullcontext()


def measure_throughput(model: Maest, t_keep: int, f_rows: int, cfg: BenchConfig,
                       spec: MelSpectrogram | None = None) -> BenchRow:
    """Time the assemble+forward path for one patchout setting.

    Model load and spectrogram construction stay outside the timed region.
    If a repetition lands under the timer floor the batch doubles and the
    measurement restarts; the row records the batch actually used.
    """
    if spec is None:
        spec = synthetic_spectrogram(cfg.segment_s)
    patchout = PatchoutSpec.inference(t_keep=t_keep, f_rows=f_rows)
    grid = slice_patches(spec, model.cfg.patch)
    kept = patchout.kept_indices(grid.f_p, grid.t_p)
    kept_tokens = len(kept) + 2  # + CLS/DIST
    patch_vecs = np.stack([grid.patches[f, t] for f, t in kept])
    tags = [(t, f) for f, t in kept]

    batch = cfg.batch
    with _thread_guard(cfg.threads):
        while True:
            patches = np.broadcast_to(patch_vecs, (batch,) + patch_vecs.shape).copy()
            for _ in range(cfg.warmup):
                tokens = model.assemble_batch(patches, tags)
                model.forward_batch(tokens)
            elapsed = []
            for _ in range(cfg.repetitions):
                t0 = time.perf_counter()
                tokens = model.assemble_batch(patches, tags)
                model.forward_batch(tokens)
                elapsed.append(time.perf_counter() - t0)
            if min(elapsed) >= cfg.min_time_s or batch >= cfg.max_batch:
                break
            batch *= 2
    audio_seconds = cfg.segment_s * batch
    rates = sorted(audio_seconds / e for e in elapsed)
    median = float(np.median(rates))
    q75, q25 = np.percentile(rates, [75, 25])
    return BenchRow(
        setting=f"T={t_keep},F={f_rows}", t_keep=t_keep, f_rows=f_rows,
        kept_tokens=kept_tokens, throughput=median, iqr=float(q75 - q25),
        batch=batch, threads=cfg.threads,
    )


@dataclass
class ProbeFixture:
    """What sweep() needs to score a frozen probe under each setting.

    The probe is trained once on no-patchout embeddings (T=1) and then only
    evaluated; per setting, the test-split embeddings are re-extracted.
    """

    specs: dict[str, MelSpectrogram]  # normalized spectrograms by track id
    labels: dict[str, NDArray]        # multi-hot rows by track id
    splits: dict[str, list[str]]      # train/valid/test id lists
    espec: EmbeddingSpec
    model: Maest                      # embedding model for probe scoring
    seg_frames: int
    probe_seed: int = 0
    probe_epochs: int = 20


def _fixture_dataset(fx: ProbeFixture, patchout: PatchoutSpec, splits) -> EmbeddingDataset:
    dim = fx.espec.output_dim(fx.model.cfg.d)
    n_labels = len(next(iter(fx.labels.values())))
    embeddings, labels, ids = {}, {}, {}
    for split, split_ids in splits.items():
        emb = np.zeros((len(split_ids), dim), dtype=np.float32)
        lab = np.zeros((len(split_ids), n_labels), dtype=np.uint8)
        for row, tid in enumerate(split_ids):
            emb[row] = track_embedding(fx.specs[tid], fx.model, fx.espec,
                                       fx.seg_frames, patchout).vector
            lab[row] = fx.labels[tid]
        embeddings[split], labels[split], ids[split] = emb, lab, list(split_ids)
    return EmbeddingDataset(embeddings=embeddings, labels=labels, ids=ids,
                            espec=str(fx.espec), model_id=fx.model.model_id())


def sweep(model: Maest, cfg: BenchConfig, probe_fixture: ProbeFixture | None = None,
          spec: MelSpectrogram | None = None) -> list[BenchRow]:
    """One row per (T, F) grid setting, sequentially to avoid interference."""
    from dataclasses import replace as dc_replace

    rows = []
    probe_weights = None
    if probe_fixture is not None:
        base = _fixture_dataset(probe_fixture, PatchoutSpec.none(), probe_fixture.splits)
        from .probe import ProbeConfig

        probe_cfg = ProbeConfig(dropout=0.0, batch=32, epochs=probe_fixture.probe_epochs,
                                lr_max=1e-3)
        probe_weights, _, _ = mlp_fit(base, probe_cfg, seed=probe_fixture.probe_seed)
    for t_keep in cfg.t_keep_grid:
        for f_rows in cfg.f_rows_grid:
            row = measure_throughput(model, t_keep, f_rows, cfg, spec=spec)
            if probe_weights is not None:
                patchout = PatchoutSpec.inference(t_keep=t_keep, f_rows=f_rows)
                test = {"test": probe_fixture.splits["test"]}
                ds = _fixture_dataset(probe_fixture, patchout, test)
                logits, _ = mlp_forward(ds.embeddings["test"], probe_weights)
                row.map = map_macro(_sigmoid(logits), ds.labels["test"])
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("setting", "kept_tokens", "throughput_median", "throughput_iqr", "map")


def emit_report(rows: list[BenchRow], out_dir, gnuplot: bool = False) -> list[Path]:
    """Write bench.csv and bench.json (and optionally bench.dat) under out_dir."""
    if not rows:
        raise EmptyInput("no bench rows to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.setting, r.kept_tokens, repr(r.throughput), repr(r.iqr),
                             "" if r.map is None else repr(r.map)])
    paths.append(csv_path)
    json_path = out_dir / "bench.json"
    payload = [
        {"setting": r.setting, "t_keep": r.t_keep, "f_rows": r.f_rows,
         "kept_tokens": r.kept_tokens, "throughput_median": r.throughput,
         "throughput_iqr": r.iqr, "batch": r.batch, "threads": r.threads, "map": r.map}
        for r in rows
    ]
    json_path.write_text(json.dumps(payload, indent=2) + "\n")
    paths.append(json_path)
    if gnuplot:
        dat_path = out_dir / "bench.dat"
        lines = ["# kept_tokens throughput_median throughput_iqr map"]
        for r in rows:
            lines.append(f"{r.kept_tokens} {r.throughput!r} {r.iqr!r} "
                         f"{'nan' if r.map is None else repr(r.map)}")
        dat_path.write_text("\n".join(lines) + "\n")
        paths.append(dat_path)
    return paths


def load_report_csv(path) -> list[dict]:
    """Parse bench.csv back into dict rows (round-trip of emit_report)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            rows.append({
                "setting": rec["setting"],
                "kept_tokens": int(rec["kept_tokens"]),
                "throughput_median": float(rec["throughput_median"]),
                "throughput_iqr": float(rec["throughput_iqr"]),
                "map": float(rec["map"]) if rec["map"] else None,
            })
    return rows
