"""Command-line entry point.

Subcommands: pretrain, eval, augment, ablation, gradcheck. Exit codes are a
stable contract: 0 success, 1 runtime failure, 2 usage/config error. Every
run writes its fully resolved config next to its outputs so it can be rerun
bit-for-bit from that file.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .audio import (SpectrogramFileError, corpus_spectrograms, read_smf1,
                    synth_corpus, write_smf1)
from .augment import make_views
from .clustering import (CentroidFileError, KMeansModel, assign_centroid,
                         centroid_distance_matrix, pool_features, read_kmc1,
                         write_kmc1)
from .config import ConfigError, build_train_config, load_config, render_config
from .evaluation import (ablation_machine_line, ablation_report,
                         embed_dataset, format_ablation_table,
                         format_probe_report, linear_probe, standard_ladder)
from .seeding import derive_seed
from .training import (CheckpointError, checkpoint_load, checkpoint_save,
                       pretrain)


def _corpus_settings(values):
    return dict(sample_rate=values["sample_rate"],
                clip_seconds=values["clip_seconds"]), \
        dict(window=values["stft_window"], hop=values["stft_hop"],
             n_mels=values["n_mels"])


def _expected_frames(values):
    n = int(round(values["sample_rate"] * values["clip_seconds"]))
    return (n - values["stft_window"]) // values["stft_hop"] + 1


def _build_pretrain_specs(values):
    """Synthesize (or load from the SMF1 cache) the unlabeled training specs."""
    wave_kw, feat_kw = _corpus_settings(values)
    n_per_class = values["corpus_clips_per_class"]
    cache_root = values["corpus_cache_dir"]
    cache = None
    if cache_root:
        import hashlib
        tag = hashlib.sha256(repr((n_per_class, values["seed"], wave_kw, feat_kw))
                             .encode()).hexdigest()[:12]
        cache = Path(cache_root) / f"corpus-{tag}"
        total = 4 * n_per_class
        if cache.is_dir() and len(list(cache.glob("*.smf"))) == total:
            return [read_smf1(cache / f"{i:05d}.smf") for i in range(total)]
    corpus = synth_corpus(n_per_class, derive_seed(values["seed"], "corpus"), **wave_kw)
    specs = [s for s, _ in corpus_spectrograms(corpus, **feat_kw)]
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        for i, spec in enumerate(specs):
            write_smf1(cache / f"{i:05d}.smf", spec)
    return specs


def _build_probe_pairs(values):
    wave_kw, feat_kw = _corpus_settings(values)
    corpus = synth_corpus(values["probe_clips_per_class"],
                          derive_seed(values["seed"], "probe-data"), **wave_kw)
    return corpus_spectrograms(corpus, **feat_kw)


def _out_path(values, key, default_name):
    if values[key]:
        return Path(values[key])
    return Path(values["out_dir"]) / default_name


def _prepare_out_dir(values):
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(render_config(values), encoding="utf-8")
    return out


def cmd_pretrain(args) -> int:
    values = load_config(args.config, args.overrides)
    cfg = build_train_config(values)
    _prepare_out_dir(values)
    specs = _build_pretrain_specs(values)
    log_path = _out_path(values, "log_path", "loss.log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a", encoding="utf-8") as log:
        def on_epoch(line):
            log.write(line + "\n")
            log.flush()
            print(line)
        ckpt = pretrain(specs, cfg, on_epoch=on_epoch,
                        config_text=render_config(values))
    ckpt_path = _out_path(values, "checkpoint_path", "checkpoint.slk")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(ckpt, ckpt_path)
    print(f"checkpoint written to {ckpt_path}")
    if ckpt.kmeans_centroids is not None:
        kmeans_path = _out_path(values, "kmeans_path", "kmeans.kmc")
        kmeans_path.parent.mkdir(parents=True, exist_ok=True)
        write_kmc1(kmeans_path, KMeansModel(ckpt.kmeans_centroids))
        print(f"kmeans centroids written to {kmeans_path}")
    return 0


def cmd_eval(args) -> int:
    values = load_config(args.config, args.overrides)
    ckpt = checkpoint_load(args.checkpoint)
    pairs = _build_probe_pairs(values)
    emb, labels = embed_dataset(ckpt.student_params(), pairs)
    result = linear_probe(emb, labels,
                          derive_seed(values["seed"], "probe-split"),
                          lr=values["probe_lr"],
                          max_epochs=values["probe_max_epochs"],
                          patience=values["probe_patience"])
    print(format_probe_report(result))
    return 0


def cmd_augment(args) -> int:
    values = load_config(args.config, args.overrides)
    aug_cfg = build_train_config(values).augment_config()
    x = read_smf1(args.input)
    kmeans = None
    dists = None
    centroid = -1
    if aug_cfg.kmix_enabled:
        kmeans_path = Path(args.kmeans) if args.kmeans \
            else _out_path(values, "kmeans_path", "kmeans.kmc")
        if not kmeans_path.is_file():
            raise ConfigError(
                f"kmix is enabled but there is no kmeans file at {kmeans_path} "
                "(pass --kmeans or disable with --set kmix=false)")
        kmeans = read_kmc1(kmeans_path)
        dists = centroid_distance_matrix(kmeans)
        centroid = assign_centroid(kmeans, pool_features(x))
    from .augment import MixQueue
    queue = MixQueue(values["queue_capacity"])
    if args.queue:
        for path in sorted(Path(args.queue).glob("*.smf")):
            spec = read_smf1(path)
            cent = assign_centroid(kmeans, pool_features(spec)) if kmeans else -1
            queue.push(spec, cent)
    seed = args.seed if args.seed is not None \
        else derive_seed(values["seed"], "augment")
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(render_config(values), encoding="utf-8")
    trace = []
    va, vb = make_views(x, queue, dists, centroid, aug_cfg, rng, trace=trace)
    write_smf1(out / "view_a.smf", va)
    write_smf1(out / "view_b.smf", vb)
    lines = [f"input {args.input} shape {x.shape[0]}x{x.shape[1]} "
             f"centroid {centroid} seed {seed}"]
    for i, info in enumerate(trace):
        lam = "none" if info["lam"] is None else repr(info["lam"])
        cp = "none" if info["counterpart_centroid"] is None \
            else str(info["counterpart_centroid"])
        y0, x0, h, w = info["box"]
        lines.append(f"view {i}: counterpart_centroid {cp} lambda {lam} "
                     f"box y0={y0!r} x0={x0!r} h={h!r} w={w!r}")
    (out / "trace.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_ablation(args) -> int:
    values = load_config(args.config, args.overrides)
    base = build_train_config(values)
    out = _prepare_out_dir(values)
    specs = _build_pretrain_specs(values)
    pairs = _build_probe_pairs(values)
    ladder = standard_ladder(base)
    results_path = out / "ablation.txt"
    rows = []
    with open(results_path, "a", encoding="utf-8") as fh:
        def on_row(row):
            fh.write(ablation_machine_line(row) + "\n")
            fh.flush()
            print(ablation_machine_line(row))
        rows = ablation_report(specs, pairs, ladder, on_row=on_row)
    table = format_ablation_table(rows)
    (out / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_suite(points=args.points, seed=args.seed)
    worst = 0.0
    for r in results:
        print(f"{r.name} max_rel_err={r.max_rel_err!r}")
        worst = max(worst, r.max_rel_err)
    ok = worst < gradcheck_mod.TOLERANCE
    print(f"overall max_rel_err={worst!r} tolerance={gradcheck_mod.TOLERANCE!r} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _add_config_args(p):
    p.add_argument("--config", default=None, help="keyed text config file")
    p.add_argument("--set", action="append", dest="overrides", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="force single-threaded deterministic execution (always "
                        "on in this implementation; flag reserved)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slicer",
        description="self-supervised audio representation learning, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    _add_config_args(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="linear-probe a checkpoint on held-out data")
    p.add_argument("--checkpoint", required=True, help="SLK1 checkpoint path")
    _add_config_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("augment", help="preview the two augmented views of one input")
    p.add_argument("--input", required=True, help="SMF1 spectrogram to augment")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="augmentation seed (default: derived from config seed)")
    p.add_argument("--kmeans", default=None, help="KMC1 centroid file")
    p.add_argument("--queue", default=None,
                   help="directory of SMF1 files to preload the queue")
    _add_config_args(p)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("ablation", help="run the four-rung component ladder")
    _add_config_args(p)
    p.set_defaults(fn=cmd_ablation)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient suite; prints max error")
    p.add_argument("--points", type=int, default=gradcheck_mod.DEFAULT_POINTS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, SpectrogramFileError, CentroidFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
