"""Patch slicing, split time/frequency positional tables, and patchout.

A spectrogram is cut into overlapping 16x16 patches on a stride-10 grid.
Patchout removes entire frequency rows and/or time columns of that grid:
random rows/columns during training, a deterministic keep-1-of-T plus
edge-row drop at inference. The surviving patches are projected and tagged
into the k0 token sequence consumed by the transformer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, InputTooShort, ShapeError
from .melfront import MelSpectrogram


@dataclass(frozen=True)
class PatchConfig:
    patch_h: int = 16  # frequency extent (mel bands)
    patch_w: int = 16  # time extent (frames)
    stride_h: int = 10
    stride_w: int = 10

    def __post_init__(self):
        if not (0 < self.stride_h <= self.patch_h and 0 < self.stride_w <= self.patch_w):
            raise ConfigError("need 0 < stride <= patch on each axis")

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w


def grid_dims(bands: int, frames: int, cfg: PatchConfig) -> tuple[int, int]:
    """(F_p, T_p) per the floor formula; raises if input is below one patch."""
    if bands < cfg.patch_h or frames < cfg.patch_w:
        raise InputTooShort(
            f"{bands}x{frames} spectrogram smaller than one {cfg.patch_h}x{cfg.patch_w} patch"
        )
    f_p = (bands - cfg.patch_h) // cfg.stride_h + 1
    t_p = (frames - cfg.patch_w) // cfg.stride_w + 1
    return f_p, t_p


@dataclass
class PatchGrid:
    """Flattened patches indexed by (frequency row, time column)."""

    patches: NDArray[np.float32]  # [F_p, T_p, patch_h * patch_w]
    cfg: PatchConfig

    @property
    def f_p(self) -> int:
        return self.patches.shape[0]

    @property
    def t_p(self) -> int:
        return self.patches.shape[1]

    def origin(self, f: int, t: int) -> tuple[int, int]:
        """Top-left (band row, frame col) of patch (f, t) in the spectrogram."""
        return f * self.cfg.stride_h, t * self.cfg.stride_w


def slice_patches(spec: MelSpectrogram, cfg: PatchConfig | None = None) -> PatchGrid:
    """Cut the spectrogram into flattened patches on the strided grid.

    Each patch is flattened row-major, frequency rows first then time
    columns; edge frames that do not complete a patch are dropped.
    """
    cfg = cfg or PatchConfig()
    f_p, t_p = grid_dims(spec.band_count, spec.frame_count, cfg)
    data = spec.data
    patches = np.empty((f_p, t_p, cfg.patch_dim), dtype=np.float32)
    for f in range(f_p):
        r0 = f * cfg.stride_h
        block = data[r0 : r0 + cfg.patch_h]
        for t in range(t_p):
            c0 = t * cfg.stride_w
            patches[f, t] = block[:, c0 : c0 + cfg.patch_w].reshape(-1)
    return PatchGrid(patches=patches, cfg=cfg)


# ---------------------------------------------------------------------------
# Patchout
# ---------------------------------------------------------------------------

def training_patchout(f_p: int, t_p: int, f_drop: int, t_drop: int, rng) -> list[tuple[int, int]]:
    """Randomly discard whole frequency rows and time columns of the grid.

    Returns the kept (f, t) index pairs in row-major order; exactly
    f_drop rows and t_drop columns are removed, deterministic per rng seed.
    """
    if not (0 <= f_drop < f_p and 0 <= t_drop < t_p):
        raise ConfigError(
            f"drop counts ({f_drop}, {t_drop}) must be < grid dims ({f_p}, {t_p})"
        )
    rows = np.sort(rng.choice(f_p, size=f_p - f_drop, replace=False))
    cols = np.sort(rng.choice(t_p, size=t_p - t_drop, replace=False))
    return [(int(f), int(t)) for f in rows for t in cols]


def scale_temporal_patchout(segment_s: float, base_t_drop: int = 15, base_segment_s: float = 5.0) -> int:
    """Temporal drop count scaled linearly with segment length (15 at 5 s)."""
    if segment_s <= 0:
        raise ConfigError(f"segment length must be positive, got {segment_s}")
    return int(round(base_t_drop * segment_s / base_segment_s))


def inference_patchout_time(f_p: int, t_p: int, t_keep: int, phase: int = 0) -> list[tuple[int, int]]:
    """Keep one out of every `t_keep` time columns (all frequency rows)."""
    if t_keep < 1:
        raise ConfigError(f"t_keep must be >= 1, got {t_keep}")
    if not 0 <= phase < t_keep:
        raise ConfigError(f"phase must be in [0, t_keep), got {phase}")
    cols = range(phase, t_p, t_keep)
    return [(f, t) for f in range(f_p) for t in cols]


# Row sets mirror the published settings: 3 rows = first + two last,
# 4 rows = two first + two last.
def _dropped_rows(f_p: int, n_rows: int) -> set[int]:
    if n_rows == 0:
        return set()
    if n_rows == 3:
        return {0, f_p - 2, f_p - 1}
    if n_rows == 4:
        return {0, 1, f_p - 2, f_p - 1}
    raise ConfigError(f"frequency patchout supports 0, 3 or 4 rows, got {n_rows}")


def inference_patchout_freq(f_p: int, t_p: int, n_rows: int) -> list[tuple[int, int]]:
    """Drop specific edge frequency rows of patches (all time columns kept)."""
    if n_rows and f_p <= n_rows:
        raise ConfigError(f"cannot drop {n_rows} rows from a {f_p}-row grid")
    dropped = _dropped_rows(f_p, n_rows)
    return [(f, t) for f in range(f_p) if f not in dropped for t in range(t_p)]


@dataclass
class PatchoutSpec:
    """Which grid positions survive. Modes: none | training | inference.

    Training removes `f_drop` random rows and `t_drop` random columns.
    Inference keeps one of every `t_keep` time columns and drops `f_rows`
    edge frequency rows; both may be active at once (that is how the
    speed/accuracy sweep combines them).
    """

    mode: str = "none"
    f_drop: int = 0
    t_drop: int = 0
    t_keep: int = 1
    f_rows: int = 0
    phase: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "training", "inference"):
            raise ConfigError(f"unknown patchout mode: {self.mode!r}")
        if self.mode == "inference" and self.t_keep < 1:
            raise ConfigError("t_keep must be >= 1")

    @classmethod
    def none(cls) -> "PatchoutSpec":
        return cls(mode="none")

    @classmethod
    def training(cls, f_drop: int, t_drop: int) -> "PatchoutSpec":
        return cls(mode="training", f_drop=f_drop, t_drop=t_drop)

    @classmethod
    def inference(cls, t_keep: int = 1, f_rows: int = 0, phase: int = 0) -> "PatchoutSpec":
        return cls(mode="inference", t_keep=t_keep, f_rows=f_rows, phase=phase)

    def kept_indices(self, f_p: int, t_p: int, rng=None) -> list[tuple[int, int]]:
        if self.mode == "none":
            return [(f, t) for f in range(f_p) for t in range(t_p)]
        if self.mode == "training":
            if rng is None:
                raise ConfigError("training patchout needs an rng")
            return training_patchout(f_p, t_p, self.f_drop, self.t_drop, rng)
        # inference: combined row drop and keep-1-of-T
        if self.f_rows and f_p <= self.f_rows:
            raise ConfigError(f"cannot drop {self.f_rows} rows from a {f_p}-row grid")
        dropped = _dropped_rows(f_p, self.f_rows)
        if self.t_keep < 1:
            raise ConfigError(f"t_keep must be >= 1, got {self.t_keep}")
        if not 0 <= self.phase < self.t_keep:
            raise ConfigError(f"phase must be in [0, t_keep), got {self.phase}")
        cols = range(self.phase, t_p, self.t_keep)
        return [(f, t) for f in range(f_p) if f not in dropped for t in cols]

    def kept_count(self, f_p: int, t_p: int) -> int:
        """Kept patch count for deterministic modes and training drop counts."""
        if self.mode == "none":
            return f_p * t_p
        if self.mode == "training":
            return (f_p - self.f_drop) * (t_p - self.t_drop)
        rows = f_p - len(_dropped_rows(f_p, self.f_rows))
        cols = len(range(self.phase, t_p, self.t_keep))
        return rows * cols


# ---------------------------------------------------------------------------
# Positional tables and token assembly
# ---------------------------------------------------------------------------

@dataclass
class PositionalTables:
    """Trainable split positional encodings: te by time column, fe by row."""

    te: NDArray  # [T_p_max, d]
    fe: NDArray  # [F_p_max, d]


def interpolate_positional(table: NDArray, l_dst: int) -> NDArray:
    """Linearly resize a positional table to `l_dst` rows.

    Per-dimension 1-D interpolation over the normalized coordinate [0, 1];
    endpoints are preserved exactly, and a same-size request returns the
    table unchanged (a copy). Repeated up/down resizing is lossy away from
    the endpoints.
    """
    table = np.asarray(table)
    l_src = table.shape[0]
    if l_src < 2:
        raise ConfigError(f"need at least 2 source rows, got {l_src}")
    if l_dst < 1:
        raise ConfigError(f"need at least 1 destination row, got {l_dst}")
    if l_dst == l_src:
        return table.copy()
    pos = np.linspace(0.0, 1.0, l_dst) * (l_src - 1)
    i0 = np.minimum(pos.astype(np.int64), l_src - 2)
    frac = (pos - i0)[:, None]
    out = table[i0] * (1.0 - frac) + table[i0 + 1] * frac
    return out.astype(table.dtype)


CLS = "CLS"
DIST = "DIST"


@dataclass
class TokenSequence:
    """Ordered token vectors with per-token tags.

    Tags are the strings "CLS"/"DIST" (always at positions 0 and 1) or a
    (time_idx, freq_idx) tuple for patch tokens.
    """

    tokens: NDArray  # [n, d]
    tags: list

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    def patch_positions(self) -> list[int]:
        return [i for i, tag in enumerate(self.tags) if isinstance(tag, tuple)]


def assemble_k0(
    grid: PatchGrid,
    keep: list[tuple[int, int]],
    proj_weight: NDArray,
    proj_bias: NDArray,
    tables: PositionalTables,
    cls_token: NDArray,
    dist_token: NDArray,
) -> TokenSequence:
    """Build the input token sequence from kept patches.

    Patch (t, f) becomes proj(patch) + te[t] + fe[f]; CLS and DIST are
    prepended, and patch tokens appear in row-major order over the kept
    (f, t) pairs.
    """
    d = proj_weight.shape[1]
    for f, t in keep:
        if not (0 <= f < grid.f_p and 0 <= t < grid.t_p):
            raise IndexError(f"keep index ({f}, {t}) outside {grid.f_p}x{grid.t_p} grid")
    if grid.t_p > tables.te.shape[0] or grid.f_p > tables.fe.shape[0]:
        raise ShapeError(
            f"positional tables ({tables.fe.shape[0]}x{tables.te.shape[0]}) do not cover "
            f"grid {grid.f_p}x{grid.t_p}; resize with interpolate_positional"
        )
    order = sorted(keep)
    dtype = proj_weight.dtype
    n = len(order)
    tokens = np.empty((n + 2, d), dtype=dtype)
    tokens[0] = cls_token
    tokens[1] = dist_token
    if n:
        flat = np.stack([grid.patches[f, t] for f, t in order]).astype(dtype)
        f_idx = np.array([f for f, _ in order])
        t_idx = np.array([t for _, t in order])
        tokens[2:] = flat @ proj_weight + proj_bias + tables.te[t_idx] + tables.fe[f_idx]
    tags = [CLS, DIST] + [(int(t), int(f)) for f, t in order]
    return TokenSequence(tokens=tokens, tags=tags)
