"""Command-line entry point: ``sesar {synth,train,sweep,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dataset import DataError, Dataset, SynthConfig, save_jsonl, synth_generate
from .harness import (MODES, STRATEGIES, ConfigError, ExperimentConfig, emit_report,
                      run_experiment, summarize, sweep)
from .model import SesarModel, TrainConfig
from .nn import grad_check

EXIT_CONFIG = 2
EXIT_DATA = 3


def _csv(kind):
    def parse(text):
        try:
            return tuple(kind(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _add_synth_args(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--synth-classes", type=int, default=None, metavar="K")
    g.add_argument("--synth-per-class", type=int, default=100, metavar="M")
    g.add_argument("--synth-test-per-class", type=int, default=50)
    g.add_argument("--synth-length", type=int, default=20, help="frames per sequence")
    g.add_argument("--synth-keypoints", type=int, default=5)
    g.add_argument("--synth-dim", type=int, default=3)
    g.add_argument("--noise", type=float, default=2.0, help="Gaussian noise std")
    g.add_argument("--data-seed", type=int, default=0)


def _synth_config(args) -> SynthConfig:
    return SynthConfig(args.synth_classes, args.synth_per_class, args.synth_length,
                       args.synth_keypoints, args.synth_dim, args.noise, args.data_seed)


def _add_experiment_args(p, multi: bool):
    p.add_argument("--data", type=str, help="dataset JSONL (meta.split tags train/test)")
    p.add_argument("--test", type=str, help="separate test JSONL")
    _add_synth_args(p)
    if multi:
        p.add_argument("--mode", type=_csv(str), default=("sesar",))
        p.add_argument("--strategy", type=_csv(str), default=("u", "kt", "kjs"))
    else:
        p.add_argument("--mode", choices=MODES, default="sesar")
        p.add_argument("--strategy", choices=STRATEGIES, default="kt")
    p.add_argument("--schedule", type=_csv(float), default=(0.05, 0.10, 0.20))
    p.add_argument("--clusters", type=int, default=None, help="k-means clusters (default 2C)")
    p.add_argument("--hidden", type=int, default=64, help="GRU units per direction")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--iters", type=int, default=2000, help="training iterations per round")
    p.add_argument("--pretrain-iters", type=int, default=None,
                   help="round-0 / RIC warmup iterations (default: --iters)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--decay-interval", type=int, default=1000)
    p.add_argument("--seed", type=_csv(int), default=(0,))
    p.add_argument("--uncertainty", choices=("ep", "vr"), default="ep")
    p.add_argument("--freeze-decoder", action="store_true")
    p.add_argument("--reinit-rounds", action="store_true")
    p.add_argument("--normalize-root", type=int, default=None,
                   help="root-centre and scale-normalize with this keypoint")
    p.add_argument("--seq-len", type=int, default=None, help="resample sequences to this length")
    p.add_argument("--pca", action="store_true", help="dump 2-D PCA of latents per round")
    p.add_argument("--dump-clusters", action="store_true")
    p.add_argument("--record-time", action="store_true",
                   help="fill the seconds column of rounds.csv (breaks byte-identical output)")
    p.add_argument("--out", type=str, default="sesar-out")


def _experiment_config(args, mode: str, strategy: str) -> ExperimentConfig:
    if args.data is None and args.synth_classes is None:
        raise ConfigError("pass --data PATH or --synth-classes K")
    train = TrainConfig(batch_size=args.batch_size, iterations=args.iters, base_lr=args.lr,
                        decay=args.decay, decay_interval=args.decay_interval,
                        freeze_decoder=args.freeze_decoder)
    return ExperimentConfig(
        mode=mode, strategy=strategy, schedule=tuple(args.schedule), train=train,
        pretrain_iterations=args.pretrain_iters, n_clusters=args.clusters,
        seeds=tuple(args.seed), hidden_size=args.hidden, num_layers=args.layers,
        uncertainty=args.uncertainty, reinit_rounds=args.reinit_rounds,
        data_path=args.data, test_path=args.test,
        synth=None if args.data else _synth_config(args),
        test_per_class=args.synth_test_per_class, normalize_root=args.normalize_root,
        seq_len=args.seq_len, pca=args.pca, dump_clusters=args.dump_clusters)


def _print_summary(reports):
    for s in summarize(reports):
        print(f"{s['mode']:>5} {s['strategy']:>3} round {s['round']} labels {s['labels']:>5} "
              f"acc {s['mean_accuracy']:.4f} +/- {s['std_accuracy']:.4f} (n={s['n_seeds']})")


def cmd_synth(args):
    if args.synth_classes is None:
        raise ConfigError("--synth-classes is required")
    cfg = _synth_config(args)
    train = synth_generate(cfg, "train")
    test = synth_generate(cfg, "test", per_class=args.synth_test_per_class)
    both = Dataset(train.sequences + test.sequences, cfg.num_classes, cfg.N, cfg.D, "all")
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(both, out)
    print(f"wrote {len(train)} train + {len(test)} test sequences to {out}")


def cmd_train(args):
    cfg = _experiment_config(args, args.mode, args.strategy)
    cfg.validate()
    reports = run_experiment(cfg)
    emit_report(reports, args.out, args.record_time, _config_dict(cfg))
    _print_summary(reports)


def cmd_sweep(args):
    for m in args.mode:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    for s in args.strategy:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    cfg = _experiment_config(args, "sesar", args.strategy[0])
    cfg.validate()
    reports = sweep(cfg, args.mode, args.strategy)
    emit_report(reports, args.out, args.record_time, _config_dict(cfg))
    _print_summary(reports)


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    F = args.keypoints * args.dim
    model = SesarModel(F, args.classes, args.hidden, args.layers, seed=args.seed)
    X = rng.normal(size=(args.batch, args.length, F))
    y = rng.integers(0, args.classes, size=args.batch)
    y[::2] = -1  # mix labeled and unlabeled rows

    def closure():
        model.zero_grad()
        model.batch_loss(X, y)
        return model.loss_terms(X, y)

    report = grad_check(closure, model.params(), args.tol, n_coords=args.coords, seed=args.seed)
    print(report)
    return 0 if report.passed else 1


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["schedule"] = list(cfg.schedule)
    d["seeds"] = list(cfg.seeds)
    return d


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sesar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset as JSONL")
    _add_synth_args(p)
    p.add_argument("--out", type=str, default="synth.jsonl")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one experiment")
    _add_experiment_args(p, multi=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a mode x strategy x seed matrix")
    _add_experiment_args(p, multi=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the model gradients")
    p.add_argument("--length", type=int, default=5)
    p.add_argument("--keypoints", type=int, default=4)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=400)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, DataError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
