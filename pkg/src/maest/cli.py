"""The `maest` command: extract, stats, train, embed, probe, sweep-blocks, bench.

Every subcommand resolves one RunConfig (file + --set overrides + --seed),
echoes it into the run directory next to a manifest, and exits 0 on
success, 1 on user error, 2 on internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import benchkit, melfront, probe as probe_mod, train as train_mod
from .errors import ConfigError, MaestError, NotFound
from .melfront import NormStats, SpectrogramStore, center_crop_30s, compute_mel, load_wav, normalize
from .model import EmbeddingSpec, Maest, init_weights, weights_load, weights_save
from .runconfig import RunConfig, load_runconfig


class UsageError(MaestError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: _Parser):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--threads", type=int, help="override run.threads (0 = library default)")
    p.add_argument("--out", required=True, help="run directory for outputs + manifest")


def _resolve(args) -> tuple[RunConfig, Path]:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    cfg = load_runconfig(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved.ini")
    return cfg, out


def _write_manifest(out: Path, command: str, inputs: dict, outputs: list, seed: int):
    manifest = {
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(str(Path(o).relative_to(out)) for o in outputs),
        "config": "resolved.ini",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_stats(path) -> NormStats:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"no such stats file: {path}")
    data = json.loads(path.read_text())
    return NormStats(mean=data["mean"], std=data["std"])


def _save_stats(stats: NormStats, path):
    Path(path).write_text(json.dumps({"mean": stats.mean, "std": stats.std}) + "\n")


def _read_id_file(path) -> list[str]:
    return [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]


def _default_splits(ids: list[str], seed: int, fractions=(0.7, 0.15, 0.15)) -> dict[str, list[str]]:
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(round(fractions[0] * len(ids)))
    n_valid = int(round(fractions[1] * len(ids)))
    return {"train": sorted(order[:n_train]),
            "valid": sorted(order[n_train : n_train + n_valid]),
            "test": sorted(order[n_train + n_valid :])}


def _load_splits(args, store: SpectrogramStore, seed: int) -> dict[str, list[str]]:
    if getattr(args, "splits", None):
        raw = json.loads(Path(args.splits).read_text())
        return {k: list(v) for k, v in raw.items()}
    return _default_splits(sorted(store.track_ids()), seed)


def _label_vocab(args, store: SpectrogramStore) -> list[int]:
    if getattr(args, "label_vocab", None):
        return json.loads(Path(args.label_vocab).read_text())
    return sorted({l for t in store.track_ids() for l in store.labels(t)})


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg, out = _resolve(args)
    mel_cfg = cfg.mel()
    label_map: dict[str, list[int]] = {}
    if args.labels:
        for line in Path(args.labels).read_text().splitlines():
            if not line.strip():
                continue
            tid, _, labels = line.partition("\t")
            label_map[tid] = [int(x) for x in labels.split(",")] if labels else []
    paths = []
    for src in args.audio:
        src = Path(src)
        if src.is_dir():
            paths.extend(sorted(src.glob("*.wav")))
        elif src.exists():
            paths.append(src)
        else:
            raise NotFound(f"no such audio input: {src}")
    if not paths:
        raise ConfigError("no .wav inputs found")
    store_dir = out / "store"
    store = SpectrogramStore(store_dir, create=True)
    written = []
    for path in paths:
        clip = load_wav(path, min_duration_s=args.min_duration_s)
        clip = center_crop_30s(clip)
        spec = compute_mel(clip, mel_cfg)
        tid = path.stem
        written.append(store.write(spec, tid, label_map.get(tid, [])))
    _write_manifest(out, "extract", {"audio": [str(p) for p in paths]},
                    [store_dir / store.INDEX_NAME] + written, cfg.seed())
    print(f"extracted {len(written)} tracks into {store_dir}")
    return 0


def cmd_stats(args) -> int:
    cfg, out = _resolve(args)
    store = SpectrogramStore(args.store)
    subset = _read_id_file(args.subset) if args.subset else sorted(store.track_ids())
    stats = melfront.compute_stats(store, subset)
    stats_path = out / "stats.json"
    _save_stats(stats, stats_path)
    _write_manifest(out, "stats", {"store": args.store, "n_tracks": len(subset)},
                    [stats_path], cfg.seed())
    print(f"mean={stats.mean:.6f} std={stats.std:.6f} over {len(subset)} tracks")
    return 0


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    store = SpectrogramStore(args.store)
    model_cfg = cfg.model()
    train_cfg = cfg.train()
    stats = _load_stats(args.stats) if args.stats else None
    init = weights_load(args.init, model_cfg) if args.init else None
    result = train_mod.fit(store, train_cfg, model_cfg, init=init, stats=stats)

    final_path = out / "final.wts"
    weights_save(result.weights, final_path)
    outputs = [final_path]
    if result.swa_weights is not None:
        swa_path = out / "swa.wts"
        weights_save(result.swa_weights, swa_path)
        outputs.append(swa_path)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        for entry in result.metrics:
            fh.write(json.dumps(entry) + "\n")
    outputs.append(metrics_path)
    vocab_path = out / "label_vocab.json"
    vocab_path.write_text(json.dumps(_label_vocab(args, store)) + "\n")
    outputs.append(vocab_path)
    _write_manifest(out, "train", {"store": args.store, "init": args.init},
                    outputs, cfg.seed())
    last = result.metrics[-1]
    print(f"trained {train_cfg.epochs} epochs, final loss {last['train_loss']:.4f}")
    return 0


def _load_model(args, cfg: RunConfig) -> Maest:
    model_cfg = cfg.model()
    if getattr(args, "random_init", False):
        return Maest(model_cfg, init_weights(model_cfg, np.random.default_rng(cfg.seed())))
    if not getattr(args, "weights", None):
        raise ConfigError("need --weights or --random-init")
    return Maest(model_cfg, weights_load(args.weights, model_cfg))


def cmd_embed(args) -> int:
    cfg, out = _resolve(args)
    model = _load_model(args, cfg)
    stats = _load_stats(args.stats)
    espec = EmbeddingSpec.parse(args.espec)
    if args.store:
        store = SpectrogramStore(args.store)
    else:
        store = SpectrogramStore(out / "store", create=True)
        for path in sorted(Path(args.audio).glob("*.wav")):
            clip = center_crop_30s(load_wav(path))
            store.write(compute_mel(clip, cfg.mel()), path.stem, [])
    splits = _load_splits(args, store, cfg.seed())
    dataset = probe_mod.build_embedding_dataset(
        store, splits, model, espec, stats, cfg.seg_frames(),
        patchout=cfg.patchout(), label_vocab=_label_vocab(args, store),
    )
    ds_dir = out / "embeddings"
    dataset.save(ds_dir)
    _write_manifest(out, "embed",
                    {"store": args.store or str(out / "store"), "weights": args.weights,
                     "espec": str(espec)},
                    sorted(ds_dir.glob("*")), cfg.seed())
    print(f"wrote {sum(len(v) for v in dataset.ids.values())} embeddings of dim "
          f"{dataset.dim} to {ds_dir}")
    return 0


def cmd_probe(args) -> int:
    cfg, out = _resolve(args)
    dataset = probe_mod.EmbeddingDataset.load(args.dataset)
    outputs = []
    if args.grid:
        best_cfg, report, rows = probe_mod.grid_search(
            dataset, cfg.probe_grid(), base=cfg.probe(), seed=cfg.seed())
        grid_path = out / "grid_rows.json"
        grid_path.write_text(json.dumps(rows, indent=2) + "\n")
        outputs.append(grid_path)
        chosen = {"batch": best_cfg.batch, "epochs": best_cfg.epochs,
                  "dropout": best_cfg.dropout, "lr_max": best_cfg.lr_max}
    else:
        _, report, history = probe_mod.mlp_fit(dataset, cfg.probe(), seed=cfg.seed())
        chosen = {"batch": cfg.probe().batch, "epochs": cfg.probe().epochs,
                  "dropout": cfg.probe().dropout, "lr_max": cfg.probe().lr_max}
    report_path = out / "probe_report.json"
    report_path.write_text(json.dumps({
        "roc_auc": report.roc_auc, "map": report.map,
        "n_labels_counted": report.n_labels_counted,
        "skipped_labels": report.skipped_labels, "config": chosen,
    }, indent=2) + "\n")
    outputs.append(report_path)
    _write_manifest(out, "probe", {"dataset": args.dataset, "grid": bool(args.grid)},
                    outputs, cfg.seed())
    print(f"probe test ROC-AUC {report.roc_auc:.4f} mAP {report.map:.4f}")
    return 0


COMBOS = ("c", "d", "a", "cd", "ca", "da", "cda")
_KIND = {"c": "cls", "d": "dist", "a": "avg"}


def cmd_sweep_blocks(args) -> int:
    cfg, out = _resolve(args)
    model = _load_model(args, cfg)
    stats = _load_stats(args.stats)
    store = SpectrogramStore(args.store)
    lo, _, hi = args.blocks.partition(":")
    blocks = list(range(int(lo), int(hi or lo) + 1))
    if not blocks or blocks[0] < 1 or blocks[-1] > model.cfg.n_blocks:
        raise ConfigError(f"block range {args.blocks} outside [1, {model.cfg.n_blocks}]")
    splits = _load_splits(args, store, cfg.seed())

    # one extraction pass over all (block, kind) pairs, then column slicing
    espec = EmbeddingSpec(tuple((n, k) for n in blocks for k in ("cls", "dist", "avg")))
    full = probe_mod.build_embedding_dataset(
        store, splits, model, espec, stats, cfg.seg_frames(),
        patchout=cfg.patchout(), label_vocab=_label_vocab(args, store))
    d = model.cfg.d
    col_of = {entry: i * d for i, entry in enumerate(espec.entries)}

    matrix: dict[str, dict[str, float]] = {}
    for n in blocks:
        matrix[str(n)] = {}
        for combo in COMBOS:
            cols = np.concatenate([
                np.arange(col_of[(n, _KIND[ch])], col_of[(n, _KIND[ch])] + d) for ch in combo
            ])
            sub = probe_mod.EmbeddingDataset(
                embeddings={s: full.embeddings[s][:, cols] for s in full.embeddings},
                labels=full.labels, ids=full.ids,
                espec=",".join(f"{n}:{_KIND[ch]}" for ch in combo), model_id=full.model_id)
            _, report, _ = probe_mod.mlp_fit(sub, cfg.probe(), seed=cfg.seed())
            matrix[str(n)][combo] = report.map
    json_path = out / "block_sweep.json"
    json_path.write_text(json.dumps(matrix, indent=2) + "\n")
    csv_path = out / "block_sweep.csv"
    lines = ["block," + ",".join(COMBOS)]
    for n in blocks:
        lines.append(f"{n}," + ",".join(repr(matrix[str(n)][c]) for c in COMBOS))
    csv_path.write_text("\n".join(lines) + "\n")
    _write_manifest(out, "sweep-blocks", {"store": args.store, "blocks": args.blocks},
                    [json_path, csv_path], cfg.seed())
    print(f"block sweep over {blocks} written to {csv_path}")
    return 0


def cmd_bench(args) -> int:
    cfg, out = _resolve(args)
    model = _load_model(args, cfg)
    bench_cfg = cfg.bench()
    fixture = None
    if args.store:
        store = SpectrogramStore(args.store)
        stats = _load_stats(args.stats)
        splits = _load_splits(args, store, cfg.seed())
        label_vocab = _label_vocab(args, store)
        label_pos = {l: i for i, l in enumerate(label_vocab)}
        specs, labels = {}, {}
        for tid in store.track_ids():
            specs[tid] = normalize(store.read(tid), stats)
            row = np.zeros(len(label_vocab), dtype=np.uint8)
            for l in store.labels(tid):
                row[label_pos[l]] = 1
            labels[tid] = row
        fixture = benchkit.ProbeFixture(
            specs=specs, labels=labels, splits=splits,
            espec=EmbeddingSpec.parse(args.espec), model=model,
            seg_frames=cfg.seg_frames(), probe_seed=cfg.seed())
    rows = benchkit.sweep(model, bench_cfg, probe_fixture=fixture)
    outputs = benchkit.emit_report(rows, out, gnuplot=args.gnuplot)
    _write_manifest(out, "bench", {"weights": getattr(args, "weights", None)},
                    outputs, cfg.seed())
    for r in rows:
        extra = "" if r.map is None else f" map={r.map:.4f}"
        print(f"{r.setting}: {r.kept_tokens} tokens, {r.throughput:.1f} audio-s/s{extra}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="maest", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="WAV files -> spectrogram store")
    p.add_argument("--audio", nargs="+", required=True, help="WAV files or directories")
    p.add_argument("--labels", help="TSV track_id<TAB>comma-separated-label-ids")
    p.add_argument("--min-duration-s", type=float, default=20.0,
                   help="reject shorter clips (0 disables)")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="normalization statistics over a store subset")
    p.add_argument("--store", required=True)
    p.add_argument("--subset", help="file with one track id per line (default: all)")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="supervised training on a store")
    p.add_argument("--store", required=True)
    p.add_argument("--init", help="initial weights archive")
    p.add_argument("--stats", help="stats JSON (default: computed from the training split)")
    p.add_argument("--label-vocab", help="JSON list of label ids")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract an embedding dataset")
    p.add_argument("--store")
    p.add_argument("--audio", help="directory of WAVs (alternative to --store)")
    p.add_argument("--weights")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--stats", required=True)
    p.add_argument("--espec", required=True, help="e.g. 7:cls,7:dist,7:avg")
    p.add_argument("--splits", help="JSON {train: [...], valid: [...], test: [...]}")
    p.add_argument("--label-vocab", help="JSON list of label ids")
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="train/search the MLP probe on an embedding dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", action="store_true", help="run the full grid search")
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep-blocks", help="block x token-combination mAP matrix")
    p.add_argument("--store", required=True)
    p.add_argument("--weights")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--stats", required=True)
    p.add_argument("--blocks", required=True, help="inclusive range, e.g. 5:12")
    p.add_argument("--splits")
    p.add_argument("--label-vocab")
    _add_common(p)
    p.set_defaults(func=cmd_sweep_blocks)

    p = sub.add_parser("bench", help="throughput/accuracy sweep over inference patchout")
    p.add_argument("--weights")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--store", help="probe fixture store (enables mAP column)")
    p.add_argument("--stats")
    p.add_argument("--espec", default="7:cls,7:dist,7:avg")
    p.add_argument("--splits")
    p.add_argument("--label-vocab")
    p.add_argument("--gnuplot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_runconfig(args.config, list(args.set))
        threads = args.threads if args.threads is not None else cfg.threads()
        guard = threadpool_limits(limits=threads) if threads > 0 else nullcontext()
        with guard:
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MaestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
