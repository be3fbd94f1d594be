"""Mel-spectrogram patchout transformer for music tagging.

Subpackages follow the pipeline: `melfront` (audio to mel store),
`patchgrid` (patches, positional tables, patchout), `model` (transformer,
embeddings, weight archive), `train` (supervised loop), `probe` (MLP
probing and metrics), `benchkit` (inference-patchout benchmarks), and
`cli` (the `maest` command).
"""

from . import errors
from .melfront import (
    AudioClip,
    MelConfig,
    MelSpectrogram,
    NormStats,
    SpectrogramStore,
    center_crop_30s,
    compute_mel,
    compute_stats,
    log_compress,
    normalize,
)
from .model import (
    Embedding,
    EmbeddingSpec,
    Maest,
    ModelConfig,
    count_params,
    init_weights,
    weights_load,
    weights_save,
)
from .patchgrid import PatchConfig, PatchoutSpec, TokenSequence, interpolate_positional, slice_patches

__version__ = "0.1.0"
