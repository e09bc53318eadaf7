"""Active-learning experiment loop, non-active baselines and report files."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .clustering import budgets, default_n_clusters, kmeans_fit
from .dataset import (Dataset, LabelPool, SynthConfig, load_jsonl, normalize,
                      oracle_annotate, resample_length, synth_generate)
from .model import SesarClassifier, TrainConfig, evaluate
from .nn import softmax
from .selection import (select_coreset, select_dis, select_kjs, select_kt,
                        select_uniform)

log = logging.getLogger(__name__)

MODES = ("c", "rc", "ric", "sesar")
STRATEGIES = ("u", "kt", "kjs", "cs", "dis")
CSV_HEADER = ["mode", "strategy", "seed", "round", "labels", "pct", "accuracy", "seconds"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    mode: str = "sesar"
    strategy: str = "kt"
    schedule: tuple = (0.05, 0.10, 0.20)
    train: TrainConfig = field(default_factory=TrainConfig)
    # reconstruction-only iterations for round 0 and the RIC warmup;
    # None means train.iterations
    pretrain_iterations: int | None = None
    n_clusters: int | None = None
    seeds: tuple = (0,)
    hidden_size: int = 64
    num_layers: int = 2
    uncertainty: str = "ep"
    reinit_rounds: bool = False
    data_path: str | None = None
    test_path: str | None = None
    synth: SynthConfig | None = None
    test_per_class: int = 50
    normalize_root: int | None = None
    seq_len: int | None = None
    pca: bool = False
    dump_clusters: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "sesar" and self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.schedule:
            raise ConfigError("schedule must not be empty")
        s = list(self.schedule)
        if any(not 0 < p <= 1 for p in s) or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError("schedule must be strictly increasing within (0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.uncertainty not in ("ep", "vr"):
            raise ConfigError(f"unknown uncertainty measure {self.uncertainty!r}")
        if self.data_path is None and self.synth is None:
            raise ConfigError("either a data file or a synthetic config is required")

    @property
    def warmup(self) -> int:
        return self.train.iterations if self.pretrain_iterations is None else self.pretrain_iterations


@dataclass
class RoundReport:
    mode: str
    strategy: str
    seed: int
    round: int
    labels: int
    pct: float
    accuracy: float
    seconds: float
    loss_first: float | None = None
    loss_last: float | None = None
    loss_mean: float | None = None
    loss_trace: list | None = None
    selection: dict | None = None
    confusion: list | None = None
    labeled: list | None = None
    clusters: dict | None = None
    pca: list | None = None

    def csv_row(self, record_time: bool = False) -> list:
        return [self.mode, self.strategy, self.seed, self.round, self.labels,
                repr(float(self.pct)), repr(float(self.accuracy)),
                f"{self.seconds:.3f}" if record_time else ""]


@dataclass
class ExperimentData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    train: Dataset
    num_classes: int


def _prepare(ds: Dataset, cfg: ExperimentConfig, T: int | None) -> Dataset:
    if cfg.normalize_root is not None:
        ds = ds.map(lambda s: normalize(s, cfg.normalize_root, ds.dim))
    if T is not None:
        ds = ds.map(lambda s: resample_length(s, T))
    return ds


def load_data(cfg: ExperimentConfig) -> ExperimentData:
    """Train/test arrays for an experiment.

    A data file may carry both splits via ``meta.split``; otherwise a
    separate test file is required.
    """
    if cfg.synth is not None:
        train = synth_generate(cfg.synth, "train")
        test = synth_generate(cfg.synth, "test", per_class=cfg.test_per_class)
    else:
        full = load_jsonl(cfg.data_path)
        train = full.subset("train")
        test = full.subset("test")
        if cfg.test_path is not None:
            test = load_jsonl(cfg.test_path)
            test = Dataset(test.sequences, full.num_classes, test.num_keypoints, test.dim, "test")
        if len(train) == 0:
            raise ConfigError("data file has no training sequences")
        if len(test) == 0:
            raise ConfigError("no test sequences: tag them with meta.split='test' or pass a test file")
    T = cfg.seq_len
    if T is None:
        lengths = {s.length for s in train.sequences} | {s.length for s in test.sequences}
        T = None if len(lengths) == 1 else max(lengths)
    train, test = _prepare(train, cfg, T), _prepare(test, cfg, T)
    if np.any(train.labels() < 0):
        raise ConfigError("the oracle needs ground-truth labels for every training sequence")
    C = max(train.num_classes, test.num_classes)
    return ExperimentData(train.to_array(), train.labels(), test.to_array(), test.labels(),
                          train, C)


def _classifier(cfg: ExperimentConfig, C: int, seed: int, **over) -> SesarClassifier:
    t = cfg.train
    params = dict(n_classes=C, hidden_size=cfg.hidden_size, num_layers=cfg.num_layers,
                  batch_size=t.batch_size, max_iter=t.iterations, learning_rate=t.base_lr,
                  decay=t.decay, decay_interval=t.decay_interval,
                  freeze_decoder=t.freeze_decoder, reconstruction_weight=t.recon_weight,
                  classification_weight=t.cla_weight, warm_start=True, random_state=seed)
    params.update(over)
    return SesarClassifier(**params)


def _target(pct: float, n: int) -> int:
    return int(round(pct * n))


def _pca2(Z: np.ndarray) -> list:
    Zc = Z - Z.mean(axis=0)
    _, _, Vt = np.linalg.svd(Zc, full_matrices=False)
    proj = Zc @ Vt[:2].T
    # fix the sign so the dump is deterministic
    signs = np.sign(proj[np.argmax(np.abs(proj), axis=0), np.arange(proj.shape[1])])
    return (proj * np.where(signs == 0, 1, signs)).tolist()


def _report(cfg, mode, strategy, seed, k, pool, n, pct, clf, data, trace, started, **extra):
    ev = evaluate(clf.model_, data.X_test, data.y_test)
    rep = RoundReport(
        mode=mode, strategy=strategy, seed=seed, round=k, labels=len(pool.labeled),
        pct=pct, accuracy=ev.accuracy, seconds=time.perf_counter() - started,
        loss_first=trace[0] if trace else None, loss_last=trace[-1] if trace else None,
        loss_mean=float(np.mean(trace)) if trace else None, loss_trace=list(trace),
        confusion=ev.confusion.tolist(), labeled=sorted(int(i) for i in pool.labeled), **extra)
    if cfg.pca:
        rep.pca = _pca2(clf.transform(data.X_train))
    log.info("%s/%s seed=%d round=%d labels=%d acc=%.4f", mode, strategy, seed, k,
             rep.labels, rep.accuracy)
    return rep


def pretrain(cfg: ExperimentConfig, data: ExperimentData, seed: int):
    """Round 0: reconstruction-only training with nothing labeled."""
    n = data.X_train.shape[0]
    clf = _classifier(cfg, data.num_classes, seed)
    pool = LabelPool.empty(n)
    started = time.perf_counter()
    clf.fit(data.X_train, pool.label_vector(), max_iter=cfg.warmup)
    return clf, pool, started


def select(cfg: ExperimentConfig, clf: SesarClassifier, pool: LabelPool, data: ExperimentData,
           pct: float, seed: int, k: int):
    """One acquisition step; returns (SelectionResult, cluster dump or None)."""
    n = data.X_train.shape[0]
    budget = _target(pct, n) - len(pool.labeled)
    if budget < 0:
        raise ConfigError(f"schedule point {pct} is below the current labeled count")
    if budget > len(pool.unlabeled):
        raise ConfigError(f"schedule point {pct} exceeds the pool")
    s = cfg.strategy
    rseed = [seed, k]
    if s == "u":
        return select_uniform(pool, budget, rseed), None
    Z = clf.transform(data.X_train)
    if s == "cs":
        return select_coreset(Z, pool, budget), None
    if s == "dis":
        return select_dis(Z, pool, budget, rseed), None
    M = cfg.n_clusters or default_n_clusters(data.num_classes, n)
    cm = kmeans_fit(Z, min(M, n), rseed)
    bg = budgets(cm, pool, pct)
    dump = None
    if cfg.dump_clusters:
        dump = {"cluster": cm.assignment.tolist(), "distance": cm.distance.tolist()}
    if s == "kt":
        return select_kt(cm, bg, pool), dump
    probs = softmax(clf.model_.logits(Z))
    return select_kjs(cm, bg, pool, probs, cfg.uncertainty), dump


def _run_al_seed(cfg: ExperimentConfig, data: ExperimentData, seed: int, round0=None):
    n = data.X_train.shape[0]
    if round0 is None:
        round0 = pretrain(cfg, data, seed)
    clf, pool, started = copy.deepcopy(round0[0]), round0[1], round0[2]
    reports = [_report(cfg, "sesar", cfg.strategy, seed, 0, pool, n, 0.0, clf, data,
                       clf.loss_curve_, started)]
    for k, pct in enumerate(cfg.schedule, start=1):
        started = time.perf_counter()
        sel, dump = select(cfg, clf, pool, data, pct, seed, k)
        pool = oracle_annotate(pool, sel.chosen, data.train)
        pool.check(n)
        if len(pool.labeled) != _target(pct, n):
            raise AssertionError(f"labeled count {len(pool.labeled)} != {_target(pct, n)}")
        if cfg.reinit_rounds:
            clf = _classifier(cfg, data.num_classes, seed)
        clf.fit(data.X_train, pool.label_vector())
        reports.append(_report(cfg, "sesar", cfg.strategy, seed, k, pool, n, pct, clf, data,
                               clf.loss_curve_, started, selection=sel.to_dict(k),
                               clusters=dump))
    return reports


def run_al(cfg: ExperimentConfig, data: ExperimentData | None = None) -> list[RoundReport]:
    """Train -> encode -> select -> annotate -> retrain, for every seed."""
    cfg.validate()
    if cfg.mode != "sesar":
        raise ConfigError("run_al needs mode 'sesar'; use run_baseline for c/rc/ric")
    data = data or load_data(cfg)
    return [r for seed in cfg.seeds for r in _run_al_seed(cfg, data, seed)]


def run_baseline(cfg: ExperimentConfig, data: ExperimentData | None = None) -> list[RoundReport]:
    """Non-active baselines on nested uniformly drawn label sets.

    c: encoder + classifier on labeled data only; rc: joint loss from
    scratch; ric: reconstruction warmup, then the joint loss.
    """
    cfg.validate()
    if cfg.mode not in ("c", "rc", "ric"):
        raise ConfigError(f"run_baseline does not handle mode {cfg.mode!r}")
    data = data or load_data(cfg)
    n = data.X_train.shape[0]
    reports = []
    for seed in cfg.seeds:
        order = np.random.default_rng([seed, 7919]).permutation(n)
        warm = None
        if cfg.mode == "ric":
            warm = pretrain(cfg, data, seed)[0]
        for k, pct in enumerate(cfg.schedule, start=1):
            started = time.perf_counter()
            pool = oracle_annotate(LabelPool.empty(n), order[: _target(pct, n)].tolist(),
                                   data.train)
            pool.check(n)
            if cfg.mode == "c":
                clf = _classifier(cfg, data.num_classes, seed, reconstruction_weight=0.0,
                                  labeled_only=True)
            elif cfg.mode == "rc":
                clf = _classifier(cfg, data.num_classes, seed)
            else:
                clf = copy.deepcopy(warm)
            clf.fit(data.X_train, pool.label_vector())
            reports.append(_report(cfg, cfg.mode, "-", seed, k, pool, n, pct, clf, data,
                                   clf.loss_curve_, started))
    return reports


def run_experiment(cfg: ExperimentConfig, data: ExperimentData | None = None):
    return run_al(cfg, data) if cfg.mode == "sesar" else run_baseline(cfg, data)


def sweep(cfg: ExperimentConfig, modes, strategies,
          data: ExperimentData | None = None) -> list[RoundReport]:
    """Every (mode, strategy) pair over every seed.

    Active strategies of the same seed share one round-0 model; it does not
    depend on the strategy.
    """
    cfg.validate()
    data = data or load_data(cfg)
    reports = []
    for mode in modes:
        if mode != "sesar":
            reports += run_baseline(replace(cfg, mode=mode), data)
            continue
        for seed in cfg.seeds:
            round0 = pretrain(cfg, data, seed)
            for s in strategies:
                sub = replace(cfg, mode="sesar", strategy=s)
                sub.validate()
                reports += _run_al_seed(sub, data, seed, round0)
    return reports


def _sorted(reports):
    return sorted(reports, key=lambda r: (r.mode, r.strategy, r.seed, r.round))


def csv_text(reports, record_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in _sorted(reports):
        w.writerow(r.csv_row(record_time))
    return buf.getvalue()


def summarize(reports) -> list[dict]:
    """Mean/std accuracy over seeds per (mode, strategy, round)."""
    groups: dict = {}
    for r in _sorted(reports):
        groups.setdefault((r.mode, r.strategy, r.round), []).append(r)
    out = []
    for (mode, strategy, k), rs in groups.items():
        acc = np.array([r.accuracy for r in rs])
        out.append({"mode": mode, "strategy": strategy, "round": k,
                    "labels": rs[0].labels, "pct": rs[0].pct,
                    "mean_accuracy": float(acc.mean()), "std_accuracy": float(acc.std()),
                    "n_seeds": len(rs)})
    return out


def emit_report(reports, path, record_time: bool = False, config: dict | None = None) -> None:
    """Write rounds.csv, summary.csv and report.json (plus optional dumps) into ``path``.

    The seconds column of rounds.csv is left blank unless ``record_time``,
    so that identical configs give byte-identical CSV files.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "rounds.csv").write_text(csv_text(reports, record_time))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "strategy", "round", "labels", "pct", "mean_accuracy",
                    "std_accuracy", "n_seeds"])
        for s in summarize(reports):
            w.writerow([s["mode"], s["strategy"], s["round"], s["labels"], repr(s["pct"]),
                        repr(s["mean_accuracy"]), repr(s["std_accuracy"]), s["n_seeds"]])
        (out / "summary.csv").write_text(buf.getvalue())
        bundle = {"config": config, "rounds": [
            {k: v for k, v in asdict(r).items() if k not in ("pca", "clusters")}
            for r in _sorted(reports)]}
        (out / "report.json").write_text(json.dumps(bundle, indent=1))
        for r in _sorted(reports):
            stem = f"{r.mode}_{r.strategy}_s{r.seed}_r{r.round}"
            if r.clusters is not None:
                with open(out / f"clusters_{stem}.csv", "w") as fh:
                    fh.write("sample_index,cluster,distance\n")
                    for i, (c, d) in enumerate(zip(r.clusters["cluster"], r.clusters["distance"])):
                        fh.write(f"{i},{c},{d!r}\n")
            if r.pca is not None:
                with open(out / f"pca_{stem}.csv", "w") as fh:
                    fh.write("sample_index,pc1,pc2\n")
                    for i, (a, b) in enumerate(r.pca):
                        fh.write(f"{i},{a!r},{b!r}\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
