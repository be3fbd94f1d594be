"""The spectrogram transformer: forward, manual backward, weights archive.

Pre-norm encoder blocks (attention + GELU MLP, residuals around both),
CLS/DIST special tokens, and a linear head on the final-norm of their
average. Block outputs can be captured post-residual and pre-final-norm
for embedding extraction. Everything is plain NumPy; the backward pass is
written out explicitly so gradients can be checked against finite
differences.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import erf

from .errors import (
    ConfigError,
    FormatError,
    MissingTensor,
    NotFound,
    NumericsError,
    ShapeError,
    ShapeMismatch,
)
from .melfront import MelSpectrogram
from .patchgrid import (
    CLS,
    DIST,
    PatchConfig,
    PatchoutSpec,
    PositionalTables,
    TokenSequence,
    assemble_k0,
    grid_dims,
    slice_patches,
)

LN_EPS = 1e-6

ARCHIVE_MAGIC = b"MAESTWTS"
ARCHIVE_VERSION = 1
_DTYPE_F32 = 0


@dataclass(frozen=True)
class ModelConfig:
    d: int = 768
    n_blocks: int = 12
    n_heads: int = 12
    mlp_ratio: int = 4
    n_labels: int = 400
    patch: PatchConfig = field(default_factory=PatchConfig)
    f_p_max: int = 9
    t_p_max: int = 186
    dropout: float = 0.0  # residual dropout in blocks; 0 at paper fidelity

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def mlp_dim(self) -> int:
        return self.d * self.mlp_ratio


def canonical_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name in the archive and its shape, in canonical order."""
    d, m = cfg.d, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.weight": (cfg.patch.patch_dim, d),
        "patch_proj.bias": (d,),
        "te": (cfg.t_p_max, d),
        "fe": (cfg.f_p_max, d),
        "cls": (d,),
        "dist": (d,),
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        shapes[f"{p}.norm1.weight"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        shapes[f"{p}.attn.qkv.weight"] = (d, 3 * d)
        shapes[f"{p}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{p}.attn.out.weight"] = (d, d)
        shapes[f"{p}.attn.out.bias"] = (d,)
        shapes[f"{p}.norm2.weight"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (d, m)
        shapes[f"{p}.mlp.fc1.bias"] = (m,)
        shapes[f"{p}.mlp.fc2.weight"] = (m, d)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["final_norm.weight"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.n_labels)
    shapes["head.bias"] = (cfg.n_labels,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Exact parameter count over all named tensors."""
    return sum(int(np.prod(s)) for s in canonical_shapes(cfg).values())


def init_weights(cfg: ModelConfig, rng, dtype=np.float32) -> dict[str, NDArray]:
    """Random initialization: Glorot-scaled projections, unit norms, zero head.

    The zero head makes the first-batch loss exactly log 2 on balanced labels.
    """
    weights: dict[str, NDArray] = {}
    for name, shape in canonical_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "final_norm.weight":
            w = np.ones(shape)
        elif name.endswith(".bias") or name.startswith("head."):
            w = np.zeros(shape)
        elif len(shape) == 2:
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            w = rng.normal(0.0, std, size=shape)
        else:
            w = rng.normal(0.0, 0.02, size=shape)  # positional tables, cls/dist
        weights[name] = w.astype(dtype)
    return weights


def validate_weights(weights: dict[str, NDArray], cfg: ModelConfig):
    expected = canonical_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise MissingTensor(f"missing tensors: {', '.join(missing)}")
    unknown = sorted(set(weights) - set(expected))
    if unknown:
        raise FormatError(f"unknown tensors: {', '.join(unknown)}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise ShapeMismatch(
                f"{name}: stored shape {tuple(weights[name].shape)}, expected {shape}"
            )


# ---------------------------------------------------------------------------
# Primitive ops (forward + backward pairs)
# ---------------------------------------------------------------------------

def _layer_norm(x, weight, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * weight + bias, (xhat, inv)


def _layer_norm_backward(dy, cache, weight):
    xhat, inv = cache
    dbias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dweight = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * weight
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dweight, dbias


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Embedding specification
# ---------------------------------------------------------------------------

TOKEN_KINDS = ("cls", "dist", "avg")


@dataclass(frozen=True)
class EmbeddingSpec:
    """Which (block, token kind) pairs to stack into an embedding."""

    entries: tuple[tuple[int, str], ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("embedding spec needs at least one entry")
        for n, kind in self.entries:
            if n < 1:
                raise ConfigError(f"block index must be >= 1, got {n}")
            if kind not in TOKEN_KINDS:
                raise ConfigError(f"unknown token kind {kind!r} (want cls/dist/avg)")

    @classmethod
    def parse(cls, text: str) -> "EmbeddingSpec":
        """Parse `block:kind[,block:kind...]`, e.g. `7:cls,7:dist,7:avg`."""
        entries = []
        for piece in text.split(","):
            piece = piece.strip()
            if not piece:
                continue
            try:
                block_s, kind = piece.split(":")
                entries.append((int(block_s), kind.strip().lower()))
            except ValueError:
                raise ConfigError(f"bad espec entry {piece!r}, want block:kind")
        return cls(entries=tuple(entries))

    def output_dim(self, d: int) -> int:
        return d * len(self.entries)

    def blocks(self) -> list[int]:
        return sorted({n for n, _ in self.entries})

    def __str__(self) -> str:
        return ",".join(f"{n}:{kind}" for n, kind in self.entries)


@dataclass
class Embedding:
    vector: NDArray[np.float32]
    espec: str
    model_id: str


@dataclass
class BlockCapture:
    """Output tokens of one block, post-residual and pre-final-norm."""

    block_index: int  # 1-based
    tokens: TokenSequence


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------

class Maest:
    """Transformer encoder over patch tokens with CLS/DIST classification head.

    Weights are a flat name->array dict (see `canonical_shapes`); they are
    cast to the requested dtype on construction and treated as immutable by
    all inference paths, so a loaded model is safe to share across threads.
    """

    def __init__(self, cfg: ModelConfig, weights: dict[str, NDArray] | None = None,
                 dtype=np.float32, rng=None):
        self.cfg = cfg
        self.dtype = dtype
        if weights is None:
            weights = init_weights(cfg, rng or np.random.default_rng(0), dtype=dtype)
        validate_weights(weights, cfg)
        self.weights = {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}
        self._model_id: str | None = None

    # -- identity ----------------------------------------------------------

    def model_id(self) -> str:
        if self._model_id is None:
            h = hashlib.sha256()
            for name in sorted(self.weights):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.weights[name], dtype=np.float32).tobytes())
            self._model_id = h.hexdigest()[:12]
        return self._model_id

    def tables(self) -> PositionalTables:
        return PositionalTables(te=self.weights["te"], fe=self.weights["fe"])

    # -- token assembly ------------------------------------------------------

    def assemble(self, grid, keep) -> TokenSequence:
        w = self.weights
        return assemble_k0(
            grid, keep, w["patch_proj.weight"], w["patch_proj.bias"],
            self.tables(), w["cls"], w["dist"],
        )

    def assemble_batch(self, patches: NDArray, tags: list[tuple[int, int]]) -> NDArray:
        """Batched k0: patches [B, K, patch_dim] with shared (t, f) tags."""
        w = self.weights
        b, k, _ = patches.shape
        t_idx = np.array([t for t, _ in tags])
        f_idx = np.array([f for _, f in tags])
        x = patches.astype(self.dtype) @ w["patch_proj.weight"] + w["patch_proj.bias"]
        x = x + w["te"][t_idx] + w["fe"][f_idx]
        tokens = np.empty((b, k + 2, self.cfg.d), dtype=self.dtype)
        tokens[:, 0] = w["cls"]
        tokens[:, 1] = w["dist"]
        tokens[:, 2:] = x
        return tokens

    def assemble_batch_backward(self, dtokens: NDArray, patches: NDArray,
                                tags: list[tuple[int, int]]) -> dict[str, NDArray]:
        grads: dict[str, NDArray] = {}
        dpt = dtokens[:, 2:]  # [B, K, d]
        grads["cls"] = dtokens[:, 0].sum(axis=0)
        grads["dist"] = dtokens[:, 1].sum(axis=0)
        grads["patch_proj.weight"] = np.einsum("bkp,bkd->pd", patches.astype(self.dtype), dpt)
        grads["patch_proj.bias"] = dpt.sum(axis=(0, 1))
        dte = np.zeros_like(self.weights["te"])
        dfe = np.zeros_like(self.weights["fe"])
        t_idx = np.array([t for t, _ in tags])
        f_idx = np.array([f for _, f in tags])
        dsum = dpt.sum(axis=0)  # [K, d]
        np.add.at(dte, t_idx, dsum)
        np.add.at(dfe, f_idx, dsum)
        grads["te"] = dte
        grads["fe"] = dfe
        return grads

    # -- forward ------------------------------------------------------------

    def forward_batch(self, tokens: NDArray, capture=(), want_caches: bool = False,
                      dropout_rng=None):
        """Run the encoder on [B, N, d] tokens.

        Returns (logits [B, n_labels], captures {block_n: [B, N, d]}, caches).
        Captured arrays are block outputs before the final norm. `caches` is
        None unless requested for a subsequent backward pass. Residual
        dropout (cfg.dropout) engages only when a dropout rng is supplied,
        i.e. on the training path.
        """
        cfg = self.cfg
        w = self.weights
        if tokens.ndim != 3 or tokens.shape[2] != cfg.d:
            raise ShapeError(f"tokens shape {tokens.shape}, expected [B, N, {cfg.d}]")
        capture = set(capture)
        bad = [n for n in capture if not 1 <= n <= cfg.n_blocks]
        if bad:
            raise ConfigError(f"capture indices {bad} outside [1, {cfg.n_blocks}]")
        x = tokens.astype(self.dtype)
        captures: dict[int, NDArray] = {}
        block_caches = [] if want_caches else None
        for i in range(cfg.n_blocks):
            x, cache = self._block_forward(x, i, want_caches, dropout_rng)
            if block_caches is not None:
                block_caches.append(cache)
            if (i + 1) in capture:
                captures[i + 1] = x.copy()
        pooled = 0.5 * (x[:, 0] + x[:, 1])
        hn, ln_cache = _layer_norm(pooled, w["final_norm.weight"], w["final_norm.bias"])
        logits = hn @ w["head.weight"] + w["head.bias"]
        if not np.all(np.isfinite(logits)):
            raise NumericsError("non-finite logits")
        caches = None
        if want_caches:
            caches = {"blocks": block_caches, "x_final": x, "pooled": pooled,
                      "ln_final": ln_cache, "hn": hn}
        return logits, captures, caches

    def _block_forward(self, x, i, want_cache, dropout_rng=None):
        w = self.weights
        p = f"blocks.{i}"
        nh, dh = self.cfg.n_heads, self.cfg.head_dim
        b, n, d = x.shape
        drop = self.cfg.dropout if dropout_rng is not None else 0.0

        h1, ln1_cache = _layer_norm(x, w[f"{p}.norm1.weight"], w[f"{p}.norm1.bias"])
        qkv = h1 @ w[f"{p}.attn.qkv.weight"] + w[f"{p}.attn.qkv.bias"]
        q = qkv[..., :d].reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
        k = qkv[..., d : 2 * d].reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
        v = qkv[..., 2 * d :].reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
        scale = 1.0 / np.sqrt(dh)
        att = _softmax(np.matmul(q, k.transpose(0, 1, 3, 2)) * scale)
        ctx = np.matmul(att, v)  # [B, nh, N, dh]
        merged = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
        attn_out = merged @ w[f"{p}.attn.out.weight"] + w[f"{p}.attn.out.bias"]
        mask_attn = None
        if drop > 0.0:
            mask_attn = (dropout_rng.random(attn_out.shape) >= drop) / (1.0 - drop)
            attn_out = attn_out * mask_attn
        u = x + attn_out

        h2, ln2_cache = _layer_norm(u, w[f"{p}.norm2.weight"], w[f"{p}.norm2.bias"])
        f1 = h2 @ w[f"{p}.mlp.fc1.weight"] + w[f"{p}.mlp.fc1.bias"]
        g = _gelu(f1)
        f2 = g @ w[f"{p}.mlp.fc2.weight"] + w[f"{p}.mlp.fc2.bias"]
        mask_mlp = None
        if drop > 0.0:
            mask_mlp = (dropout_rng.random(f2.shape) >= drop) / (1.0 - drop)
            f2 = f2 * mask_mlp
        y = u + f2

        cache = None
        if want_cache:
            cache = dict(ln1=ln1_cache, h1=h1, q=q, k=k, v=v, att=att, merged=merged,
                         ln2=ln2_cache, h2=h2, f1=f1, g=g,
                         mask_attn=mask_attn, mask_mlp=mask_mlp)
        return y, cache

    def block_forward_tokens(self, seq: TokenSequence, block_index: int) -> TokenSequence:
        """Apply a single encoder block to one token sequence (0-based index)."""
        y, _ = self._block_forward(seq.tokens[None, ...].astype(self.dtype), block_index, False)
        return TokenSequence(tokens=y[0], tags=list(seq.tags))

    def forward(self, k0: TokenSequence, capture=()):
        """Single-sequence forward; returns (logits vector, BlockCapture list)."""
        logits, caps, _ = self.forward_batch(k0.tokens[None, ...], capture=capture)
        captures = [
            BlockCapture(block_index=n, tokens=TokenSequence(tokens=caps[n][0], tags=list(k0.tags)))
            for n in sorted(caps)
        ]
        return logits[0], captures

    # -- backward -----------------------------------------------------------

    def backward_batch(self, caches, dlogits: NDArray):
        """Gradients of a scalar loss given d(loss)/d(logits).

        Returns (grads for encoder/head tensors, dtokens [B, N, d]).
        """
        w = self.weights
        grads: dict[str, NDArray] = {}
        hn = caches["hn"]
        grads["head.weight"] = hn.T @ dlogits
        grads["head.bias"] = dlogits.sum(axis=0)
        dhn = dlogits @ w["head.weight"].T
        dpooled, dw, db = _layer_norm_backward(dhn, caches["ln_final"], w["final_norm.weight"])
        grads["final_norm.weight"] = dw
        grads["final_norm.bias"] = db
        dx = np.zeros_like(caches["x_final"])
        dx[:, 0] = 0.5 * dpooled
        dx[:, 1] = 0.5 * dpooled
        for i in reversed(range(self.cfg.n_blocks)):
            dx = self._block_backward(dx, caches["blocks"][i], i, grads)
        return grads, dx

    def _block_backward(self, dy, cache, i, grads):
        w = self.weights
        p = f"blocks.{i}"
        nh, dh = self.cfg.n_heads, self.cfg.head_dim
        b, n, d = dy.shape
        scale = 1.0 / np.sqrt(dh)

        # MLP half: y = u + drop(fc2(gelu(fc1(ln2(u)))))
        du = dy.copy()
        g, f1, h2 = cache["g"], cache["f1"], cache["h2"]
        df2 = dy if cache["mask_mlp"] is None else dy * cache["mask_mlp"]
        grads[f"{p}.mlp.fc2.weight"] = np.einsum("bnm,bnd->md", g, df2)
        grads[f"{p}.mlp.fc2.bias"] = df2.sum(axis=(0, 1))
        dg = df2 @ w[f"{p}.mlp.fc2.weight"].T
        df1 = dg * _gelu_grad(f1)
        grads[f"{p}.mlp.fc1.weight"] = np.einsum("bnd,bnm->dm", h2, df1)
        grads[f"{p}.mlp.fc1.bias"] = df1.sum(axis=(0, 1))
        dh2 = df1 @ w[f"{p}.mlp.fc1.weight"].T
        dun, dw2, db2 = _layer_norm_backward(dh2, cache["ln2"], w[f"{p}.norm2.weight"])
        grads[f"{p}.norm2.weight"] = dw2
        grads[f"{p}.norm2.bias"] = db2
        du += dun

        # Attention half: u = x + drop(out(merge(att @ v)))
        dx = du.copy()
        dout = du if cache["mask_attn"] is None else du * cache["mask_attn"]
        merged = cache["merged"]
        grads[f"{p}.attn.out.weight"] = np.einsum("bnd,bne->de", merged, dout)
        grads[f"{p}.attn.out.bias"] = dout.sum(axis=(0, 1))
        dmerged = dout @ w[f"{p}.attn.out.weight"].T
        dctx = dmerged.reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
        att, q, k, v = cache["att"], cache["q"], cache["k"], cache["v"]
        datt = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv = np.matmul(att.transpose(0, 1, 3, 2), dctx)
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = np.matmul(dscores, k)
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
        dqkv = np.concatenate(
            [a.transpose(0, 2, 1, 3).reshape(b, n, d) for a in (dq, dk, dv)], axis=-1
        )
        h1 = cache["h1"]
        grads[f"{p}.attn.qkv.weight"] = np.einsum("bnd,bne->de", h1, dqkv)
        grads[f"{p}.attn.qkv.bias"] = dqkv.sum(axis=(0, 1))
        dh1 = dqkv @ w[f"{p}.attn.qkv.weight"].T
        dxn, dw1, db1 = _layer_norm_backward(dh1, cache["ln1"], w[f"{p}.norm1.weight"])
        grads[f"{p}.norm1.weight"] = dw1
        grads[f"{p}.norm1.bias"] = db1
        dx += dxn
        return dx

    # -- embedding extraction -------------------------------------------------

    def extract_embedding(self, spec: MelSpectrogram, espec: EmbeddingSpec,
                          patchout: PatchoutSpec | None = None, rng=None) -> Embedding:
        """Stack the requested block/token reads for one spectrogram segment."""
        bad = [n for n in espec.blocks() if n > self.cfg.n_blocks]
        if bad:
            raise ConfigError(f"espec blocks {bad} exceed n_blocks={self.cfg.n_blocks}")
        patchout = patchout or PatchoutSpec.none()
        grid = slice_patches(spec, self.cfg.patch)
        kept = patchout.kept_indices(grid.f_p, grid.t_p, rng)
        if not kept:
            raise ConfigError("patchout kept no tokens")
        k0 = self.assemble(grid, kept)
        _, captures = self.forward(k0, capture=espec.blocks())
        by_block = {c.block_index: c.tokens for c in captures}
        parts = []
        for n, kind in espec.entries:
            toks = by_block[n]
            if kind == "cls":
                parts.append(toks.tokens[0])
            elif kind == "dist":
                parts.append(toks.tokens[1])
            else:
                patch_rows = toks.patch_positions()
                parts.append(toks.tokens[patch_rows].mean(axis=0))
        vector = np.concatenate(parts).astype(np.float32)
        if not np.all(np.isfinite(vector)):
            raise NumericsError("non-finite embedding")
        return Embedding(vector=vector, espec=str(espec), model_id=self.model_id())


# ---------------------------------------------------------------------------
# Named-tensor archive
# ---------------------------------------------------------------------------

def weights_save(weights: dict[str, NDArray], path):
    """Write the named-tensor archive (sorted manifest, little-endian f32)."""
    names = sorted(weights)
    manifest = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values in tensor {name}")
        encoded = name.encode("utf-8")
        manifest += struct.pack("<H", len(encoded)) + encoded
        manifest += struct.pack("<B", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape)
        manifest += struct.pack("<BQ", _DTYPE_F32, len(payload))
        payload += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<HI", ARCHIVE_VERSION, len(names)))
        fh.write(manifest)
        fh.write(payload)


def weights_load(path, cfg: ModelConfig | None = None) -> dict[str, NDArray]:
    """Read an archive; with a config, validate names and shapes against it."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise NotFound(f"no such weights archive: {path}")
    if len(raw) < 14 or raw[:8] != ARCHIVE_MAGIC:
        raise FormatError(f"not a weights archive: {path}")
    version, count = struct.unpack_from("<HI", raw, 8)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}")
    off = 14
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            dtype_tag, data_off = struct.unpack_from("<BQ", raw, off)
            off += 9
            if dtype_tag != _DTYPE_F32:
                raise FormatError(f"tensor {name}: unsupported dtype tag {dtype_tag}")
            entries.append((name, shape, data_off))
    except struct.error as exc:
        raise FormatError(f"truncated archive manifest: {exc}")
    payload = raw[off:]
    weights: dict[str, NDArray] = {}
    for name, shape, data_off in entries:
        if name in weights:
            raise FormatError(f"duplicate tensor name {name}")
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        blob = payload[data_off : data_off + n_bytes]
        if len(blob) != n_bytes:
            raise FormatError(f"truncated payload for tensor {name}")
        weights[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    if cfg is not None:
        validate_weights(weights, cfg)
    return weights
