"""Sequence data model, JSONL I/O, label-pool bookkeeping and synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class SkeletonSequence:
    id: str
    frames: np.ndarray  # (T, N*D)
    label: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Dataset:
    sequences: list
    num_classes: int
    num_keypoints: int
    dim: int
    split: str = "train"

    def __post_init__(self):
        width = self.num_keypoints * self.dim
        seen = set()
        for s in self.sequences:
            if s.id in seen:
                raise DataError(f"duplicate sequence id {s.id!r}")
            seen.add(s.id)
            if s.frames.ndim != 2 or s.frames.shape[1] != width:
                raise DataError(f"sequence {s.id!r}: frames must be (T, {width})")
            if s.frames.shape[0] < 2:
                raise DataError(f"sequence {s.id!r}: need at least 2 frames")
            if not np.all(np.isfinite(s.frames)):
                raise DataError(f"sequence {s.id!r}: non-finite coordinates")
            if s.label is not None and not 0 <= s.label < self.num_classes:
                raise DataError(f"sequence {s.id!r}: label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def frame_size(self) -> int:
        return self.num_keypoints * self.dim

    def labels(self) -> np.ndarray:
        """Label per sequence, -1 where unknown."""
        return np.array([-1 if s.label is None else s.label for s in self.sequences], dtype=int)

    def to_array(self) -> np.ndarray:
        """Stack into (n, T, F); all sequences must share T."""
        if not self.sequences:
            return np.zeros((0, 0, self.frame_size))
        lengths = {s.length for s in self.sequences}
        if len(lengths) > 1:
            raise DataError(f"sequences have different lengths {sorted(lengths)}; resample first")
        return np.stack([s.frames for s in self.sequences])

    def map(self, fn) -> "Dataset":
        return Dataset([fn(s) for s in self.sequences], self.num_classes,
                       self.num_keypoints, self.dim, self.split)

    def subset(self, split: str) -> "Dataset":
        seqs = [s for s in self.sequences if s.meta.get("split", "train") == split]
        return Dataset(seqs, self.num_classes, self.num_keypoints, self.dim, split)


def load_jsonl(path, dim: int | None = None) -> Dataset:
    """Read a dataset file; see the README for the line schema.

    Without a header line, ``num_classes`` is 1 + the largest label and the
    keypoint dimension defaults to 3 when the frame width allows it, else 1.
    """
    header = {}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            if not rows and not header and "frames" not in obj and "num_classes" in obj:
                header = obj
                continue
            rows.append((lineno, obj))
    if not rows:
        raise DataError("empty dataset")

    width = None
    if "num_keypoints" in header and "dim" in header:
        width = int(header["num_keypoints"]) * int(header["dim"])
    seqs = []
    for lineno, obj in rows:
        try:
            frames = np.asarray(obj["frames"], dtype=np.float64)
            sid = str(obj.get("id", f"seq-{len(seqs)}"))
            label = obj.get("label")
            meta = {str(k): str(v) for k, v in (obj.get("meta") or {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: malformed record ({exc})") from None
        if frames.ndim != 2:
            raise DataError(f"line {lineno}: frames must be a list of equal-length frames")
        if width is None:
            width = frames.shape[1]
        if frames.shape[1] != width:
            raise DataError(f"line {lineno}: frame length {frames.shape[1]} != {width}")
        if frames.shape[0] < 2:
            raise DataError(f"line {lineno}: need at least 2 frames")
        if not np.all(np.isfinite(frames)):
            raise DataError(f"line {lineno}: non-finite coordinates")
        if label is not None and (not isinstance(label, int) or label < 0):
            raise DataError(f"line {lineno}: label must be a non-negative integer or null")
        seqs.append((lineno, SkeletonSequence(sid, frames, label, meta)))

    labels = [s.label for _, s in seqs if s.label is not None]
    num_classes = int(header.get("num_classes", max(labels, default=-1) + 1))
    for lineno, s in seqs:
        if s.label is not None and s.label >= num_classes:
            raise DataError(f"line {lineno}: label {s.label} >= num_classes {num_classes}")
    if "num_keypoints" in header:
        n_kp, d = int(header["num_keypoints"]), int(header["dim"])
    else:
        d = dim if dim is not None else (3 if width % 3 == 0 else 1)
        if width % d:
            raise DataError(f"frame width {width} is not a multiple of dim {d}")
        n_kp = width // d
    try:
        return Dataset([s for _, s in seqs], max(num_classes, 1), n_kp, d)
    except DataError as exc:
        raise DataError(str(exc)) from None


def save_jsonl(dataset: Dataset, path, header: bool = True) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(json.dumps({"num_classes": dataset.num_classes,
                                 "num_keypoints": dataset.num_keypoints,
                                 "dim": dataset.dim}) + "\n")
        for s in dataset.sequences:
            rec = {"id": s.id, "label": s.label, "frames": s.frames.tolist()}
            if s.meta:
                rec["meta"] = s.meta
            fh.write(json.dumps(rec) + "\n")


def normalize(seq: SkeletonSequence, root_index: int = 0, dim: int = 3) -> SkeletonSequence:
    """Root-centre every frame and divide by the mean root-to-farthest distance."""
    T, width = seq.frames.shape
    n_kp = width // dim
    if not 0 <= root_index < n_kp:
        raise ValueError(f"root_index {root_index} outside [0, {n_kp})")
    pts = seq.frames.reshape(T, n_kp, dim)
    centred = pts - pts[:, root_index: root_index + 1, :]
    scale = np.linalg.norm(centred, axis=2).max(axis=1).mean()
    if scale > 0:
        centred = centred / scale
    return SkeletonSequence(seq.id, centred.reshape(T, width), seq.label, dict(seq.meta))


def resample_length(seq: SkeletonSequence, T_out: int) -> SkeletonSequence:
    """Linear interpolation onto ``T_out`` evenly spaced times in [0, T-1]."""
    if T_out < 2:
        raise ValueError("T_out must be >= 2")
    frames = seq.frames
    T = frames.shape[0]
    if T_out == T:
        return SkeletonSequence(seq.id, frames.copy(), seq.label, dict(seq.meta))
    t = np.linspace(0.0, T - 1.0, T_out)
    lo = np.minimum(np.floor(t).astype(int), T - 2)
    frac = (t - lo)[:, None]
    out = (1.0 - frac) * frames[lo] + frac * frames[lo + 1]
    out[0], out[-1] = frames[0], frames[-1]
    return SkeletonSequence(seq.id, out, seq.label, dict(seq.meta))


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 6
    sequences_per_class: int = 100
    T: int = 20
    N: int = 5
    D: int = 3
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "sequences_per_class", "T", "N", "D"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SynthConfig.{name} must be positive")
        if self.T < 2:
            raise ValueError("SynthConfig.T must be >= 2")
        if self.noise_std < 0:
            raise ValueError("SynthConfig.noise_std must be >= 0")


_SPLIT_STREAM = {"train": 1, "test": 2}


def class_templates(cfg: SynthConfig) -> np.ndarray:
    """Noise-free trajectories, one (T, N*D) matrix per class.

    Class k oscillates at its own angular frequency; amplitudes and phases
    per keypoint coordinate are drawn once from ``cfg.seed``.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    C, F = cfg.num_classes, cfg.N * cfg.D
    omega = 2.0 * math.pi * (1.0 + np.arange(C)) / (2.0 * cfg.T) + rng.uniform(0, 0.1, size=C)
    amp = rng.uniform(0.5, 1.5, size=(C, F))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=(C, F))
    t = np.arange(cfg.T, dtype=np.float64)
    return amp[:, None, :] * np.sin(omega[:, None, None] * t[None, :, None] + phase[:, None, :])


def synth_generate(cfg: SynthConfig, split: str = "train",
                   per_class: int | None = None) -> Dataset:
    """Balanced synthetic dataset; train and test splits share class templates."""
    if split not in _SPLIT_STREAM:
        raise ValueError(f"unknown split {split!r}")
    per_class = cfg.sequences_per_class if per_class is None else per_class
    templates = class_templates(cfg)
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM[split]])
    seqs = []
    for i in range(cfg.num_classes * per_class):
        k = i % cfg.num_classes
        frames = templates[k] + rng.normal(0.0, cfg.noise_std, size=templates[k].shape)
        seqs.append(SkeletonSequence(f"{split}-{i:06d}", frames, k, {"split": split}))
    return Dataset(seqs, cfg.num_classes, cfg.N, cfg.D, split)


@dataclass(frozen=True)
class LabelPool:
    """Disjoint labeled / unlabeled index sets over a training set."""

    labeled: tuple
    unlabeled: tuple
    revealed: dict = field(default_factory=dict)

    def __post_init__(self):
        lab, unl = set(self.labeled), set(self.unlabeled)
        if lab & unl:
            raise ValueError("labeled and unlabeled sets overlap")
        if len(lab) != len(self.labeled) or len(unl) != len(self.unlabeled):
            raise ValueError("duplicate indices in pool")
        if set(self.revealed) != lab:
            raise ValueError("revealed labels must cover exactly the labeled set")

    @classmethod
    def empty(cls, n: int) -> "LabelPool":
        return cls((), tuple(range(n)), {})

    @classmethod
    def from_partial_labels(cls, y: Iterable[int]) -> "LabelPool":
        y = np.asarray(list(y), dtype=int)
        lab = tuple(int(i) for i in np.flatnonzero(y >= 0))
        unl = tuple(int(i) for i in np.flatnonzero(y < 0))
        return cls(lab, unl, {i: int(y[i]) for i in lab})

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def is_labeled(self, i: int) -> bool:
        return i in self.revealed

    def label_vector(self) -> np.ndarray:
        """Partial labels in the sklearn semi-supervised convention (-1 = unlabeled)."""
        y = np.full(self.size, -1, dtype=int)
        for i, c in self.revealed.items():
            y[i] = c
        return y

    def check(self, n: int | None = None) -> None:
        n = self.size if n is None else n
        if set(self.labeled) | set(self.unlabeled) != set(range(n)):
            raise AssertionError("pool does not cover the training indices")
        if set(self.labeled) & set(self.unlabeled):
            raise AssertionError("pool sets overlap")
        if set(self.revealed) != set(self.labeled):
            raise AssertionError("revealed labels out of sync with labeled set")


def oracle_annotate(pool: LabelPool, chosen: Iterable[int], truth: Dataset) -> LabelPool:
    """Move ``chosen`` from unlabeled to labeled, revealing their true labels."""
    chosen = [int(i) for i in chosen]
    unl = set(pool.unlabeled)
    for i in chosen:
        if i not in unl:
            raise ValueError(f"index {i} is not in the unlabeled pool")
    if len(set(chosen)) != len(chosen):
        raise ValueError("duplicate indices in selection")
    revealed = dict(pool.revealed)
    for i in chosen:
        label = truth.sequences[i].label
        if label is None:
            raise DataError(f"oracle has no label for sequence {truth.sequences[i].id!r}")
        revealed[i] = label
    picked = set(chosen)
    return LabelPool(pool.labeled + tuple(chosen),
                     tuple(i for i in pool.unlabeled if i not in picked), revealed)
