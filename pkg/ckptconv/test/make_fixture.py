#!/usr/bin/env python3
"""Build converter test fixtures with the primary engine.

Writes into the directory given as argv[1]:
  reference.wts     small random-model archive (the conversion target)
  target.json       matching target config for ckptconv
  store/            tiny spectrogram store (8 synthetic tracks)
  stats.json        normalization stats for the store
  config.ini        primary CLI config matching the toy model
"""

import json
import sys
from pathlib import Path

import numpy as np

from maest.melfront import MelSpectrogram, SpectrogramStore, compute_stats
from maest.model import ModelConfig, init_weights, weights_save
from maest.patchgrid import PatchConfig

OUT = Path(sys.argv[1])
OUT.mkdir(parents=True, exist_ok=True)

cfg = ModelConfig(d=32, n_blocks=2, n_heads=4, n_labels=4,
                  patch=PatchConfig(), f_p_max=9, t_p_max=12)
rng = np.random.default_rng(42)
weights = init_weights(cfg, rng)
weights["head.weight"] = rng.normal(0, 0.1, weights["head.weight"].shape).astype(np.float32)
weights_save(weights, OUT / "reference.wts")

(OUT / "target.json").write_text(json.dumps({
    "d": 32, "n_blocks": 2, "n_heads": 4, "mlp_ratio": 4, "n_labels": 4,
    "patch_dim": 256, "f_p_max": 9, "t_p_max": 12,
}, indent=2) + "\n")

store = SpectrogramStore(OUT / "store", create=True)
for i in range(8):
    data = np.abs(rng.normal(0.5, 0.3, (96, 128))).astype(np.float32)
    store.write(MelSpectrogram(data=data, hop_ms=16), f"fx{i}", labels=[i % 4])
stats = compute_stats(store, store.track_ids())
(OUT / "stats.json").write_text(json.dumps({"mean": stats.mean, "std": stats.std}) + "\n")

(OUT / "config.ini").write_text(
    "[model]\nd = 32\nn_blocks = 2\nn_heads = 4\nn_labels = 4\n"
    "f_p_max = 9\nt_p_max = 12\n\n[train]\nseg_frames = 128\n"
)
print(f"fixture written to {OUT}")
