"""Encoder / decoder / classifier model, semi-supervised loss and training."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import LabelPool
from .nn import (AdamState, BiGruEncoder, GruDecoder, Linear, adam_step,
                 load_checkpoint, log_softmax, save_checkpoint, softmax)
from .validation import check_partial_labels, check_sequences


@dataclass
class TrainConfig:
    batch_size: int = 32
    iterations: int = 2000
    base_lr: float = 1e-4
    decay: float = 0.95
    decay_interval: int = 1000
    seed: int = 0
    freeze_decoder: bool = False
    recon_weight: float = 1.0
    cla_weight: float = 1.0
    # draw batches from the labeled set only (classifier-only baseline)
    labeled_only: bool = False

    def __post_init__(self):
        if self.batch_size <= 0 or self.iterations < 0 or self.decay_interval <= 0:
            raise ValueError("batch_size and decay_interval must be positive, iterations >= 0")
        if self.recon_weight < 0 or self.cla_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.base_lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("base_lr must be positive and decay in (0, 1]")


class SesarModel:
    """Bidirectional GRU encoder with a weakened GRU decoder and a linear classifier.

    The encoder's final states form the latent vector that feeds both the
    decoder (reconstruction) and the classifier.
    """

    def __init__(self, input_size: int, num_classes: int, hidden_size: int = 64,
                 num_layers: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_size = input_size
        self.num_classes = num_classes
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.seed = seed
        self.encoder = BiGruEncoder(input_size, hidden_size, num_layers, rng)
        latent = self.encoder.latent_size
        self.decoder = GruDecoder(latent, input_size, rng)
        self.classifier = Linear("cls", latent, num_classes, rng)
        self.optimizer = AdamState()
        self.iteration = 0

    @property
    def latent_size(self) -> int:
        return self.encoder.latent_size

    def params(self):
        return self.encoder.params() + self.decoder.params() + self.classifier.params()

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def set_decoder_frozen(self, frozen: bool) -> None:
        for p in self.decoder.params():
            p.frozen = frozen

    def batch_loss(self, X: np.ndarray, y: np.ndarray, recon_weight: float = 1.0,
                   cla_weight: float = 1.0, backward: bool = True):
        """Summed per-sample loss over a batch.

        Every sample contributes its mean-L1 reconstruction loss; samples with
        ``y >= 0`` add cross-entropy. Returns (total, recon per sample,
        cross-entropy per sample with NaN for unlabeled rows).
        """
        B, T, F = X.shape
        H = self.encoder.forward(X)
        dH = np.zeros_like(H)
        total = 0.0

        recon = np.zeros(B)
        if recon_weight > 0:
            Xhat = self.decoder.forward(H, T)
            diff = Xhat - X
            recon = np.abs(diff).reshape(B, -1).mean(axis=1)
            total += recon_weight * recon.sum()
            if backward:
                dH += self.decoder.backward(recon_weight * np.sign(diff) / (T * F))

        ce = np.full(B, np.nan)
        lab = np.flatnonzero(y >= 0)
        if lab.size and cla_weight > 0:
            Hl = H[lab]
            logits = self.classifier.forward(Hl)
            logp = log_softmax(logits)
            yl = y[lab]
            ce[lab] = -logp[np.arange(lab.size), yl]
            total += cla_weight * ce[lab].sum()
            if backward:
                dlogits = np.exp(logp)
                dlogits[np.arange(lab.size), yl] -= 1.0
                dH[lab] += self.classifier.backward(cla_weight * dlogits)

        if backward:
            self.encoder.backward(dH)
        return float(total), recon, ce

    def loss_terms(self, X: np.ndarray, y: np.ndarray, recon_weight: float = 1.0,
                   cla_weight: float = 1.0) -> np.ndarray:
        """Forward-only loss split into its additive terms.

        One term per reconstructed entry and one per labeled sample; the sum
        equals the ``batch_loss`` total. Used for finite-difference checks.
        """
        B, T, F = X.shape
        H = self.encoder.forward(X)
        terms = []
        if recon_weight > 0:
            Xhat = self.decoder.forward(H, T)
            terms.append((recon_weight / (T * F)) * np.abs(Xhat - X).reshape(-1))
        lab = np.flatnonzero(y >= 0)
        if lab.size and cla_weight > 0:
            logp = log_softmax(self.logits(H[lab]))
            terms.append(-cla_weight * logp[np.arange(lab.size), y[lab]])
        return np.concatenate(terms) if terms else np.zeros(0)

    def logits(self, H: np.ndarray) -> np.ndarray:
        return H @ self.classifier.W.value + self.classifier.b.value

    # persistence -----------------------------------------------------------------

    def save(self, path, train_config: TrainConfig | None = None,
             pool: LabelPool | None = None) -> None:
        """Write the checkpoint; with a config or pool also write ``<path>.meta.json``."""
        arch = {"input_size": self.input_size, "num_classes": self.num_classes,
                "hidden_size": self.hidden_size, "num_layers": self.num_layers,
                "seed": self.seed}
        save_checkpoint(path, self.params(), self.optimizer, self.iteration, {"arch": arch})
        if train_config is not None or pool is not None:
            side = {
                "train_config": asdict(train_config) if train_config else None,
                "pool": None if pool is None else {
                    "labeled": list(pool.labeled), "unlabeled": list(pool.unlabeled),
                    "revealed": {str(k): v for k, v in pool.revealed.items()}},
            }
            with open(f"{path}.meta.json", "w") as fh:
                json.dump(side, fh)

    @classmethod
    def load(cls, path) -> "SesarModel":
        with open(path) as fh:
            arch = json.load(fh)["extra"]["arch"]
        model = cls(**arch)
        opt, iteration, _ = load_checkpoint(path, model.params())
        model.optimizer = opt or AdamState()
        model.iteration = iteration
        return model


def load_sidecar(path):
    """Read the (TrainConfig, LabelPool) written next to a checkpoint."""
    with open(f"{path}.meta.json") as fh:
        side = json.load(fh)
    cfg = TrainConfig(**side["train_config"]) if side["train_config"] else None
    pool = None
    if side["pool"] is not None:
        p = side["pool"]
        pool = LabelPool(tuple(p["labeled"]), tuple(p["unlabeled"]),
                         {int(k): v for k, v in p["revealed"].items()})
    return cfg, pool


def _labels_from_pool(pool: LabelPool) -> np.ndarray:
    try:
        return pool.label_vector()
    except IndexError:
        raise ValueError("pool indices exceed the training set") from None


def sample_loss(model: SesarModel, x: np.ndarray, index: int, pool: LabelPool,
                cfg: TrainConfig | None = None) -> float:
    """Loss of one training sample: reconstruction, plus cross-entropy if labeled."""
    cfg = cfg or TrainConfig()
    if index in pool.labeled:
        if index not in pool.revealed:
            raise KeyError(f"labeled index {index} has no revealed label")
        y = pool.revealed[index]
    else:
        y = -1
    total, _, _ = model.batch_loss(np.asarray(x, dtype=np.float64)[None], np.array([y]),
                                   cfg.recon_weight, cfg.cla_weight, backward=False)
    return total


def train(model: SesarModel, X: np.ndarray, pool: LabelPool, cfg: TrainConfig):
    """Run ``cfg.iterations`` Adam steps on shuffled minibatches.

    Batches mix labeled and unlabeled samples unless ``cfg.labeled_only``.
    The shuffle stream is seeded by (cfg.seed, model.iteration), so a run is
    reproducible and successive rounds see different orders. Returns the
    model and the per-iteration loss trace.
    """
    X = check_sequences(X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if pool.size != n:
        raise ValueError(f"pool covers {pool.size} indices but X has {n} samples")
    y = _labels_from_pool(pool)
    if y.size and y.max() >= model.num_classes:
        raise ValueError(f"label {int(y.max())} out of range for {model.num_classes} classes")
    candidates = np.array(sorted(pool.labeled), dtype=int) if cfg.labeled_only else np.arange(n)
    trace: list[float] = []
    if cfg.iterations == 0 or candidates.size == 0:
        return model, trace

    opt = model.optimizer
    opt.base_lr, opt.decay, opt.decay_interval = cfg.base_lr, cfg.decay, cfg.decay_interval
    model.set_decoder_frozen(cfg.freeze_decoder)
    params = model.params()
    rng = np.random.default_rng([cfg.seed, model.iteration])
    order = rng.permutation(candidates)
    pos = 0
    for _ in range(cfg.iterations):
        if pos >= order.size:
            order = rng.permutation(candidates)
            pos = 0
        idx = order[pos: pos + cfg.batch_size]
        pos += cfg.batch_size
        loss, _, _ = model.batch_loss(X[idx], y[idx], cfg.recon_weight, cfg.cla_weight)
        adam_step(params, opt)
        model.iteration += 1
        trace.append(loss)
    return model, trace


def encode_all(model: SesarModel, X: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Latent matrix (n, latent_size), rows in input order."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros((0, model.latent_size))
    return np.concatenate([model.encoder.forward(X[i: i + chunk])
                           for i in range(0, X.shape[0], chunk)])


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    predictions: np.ndarray


def evaluate(model: SesarModel, X: np.ndarray, y: np.ndarray) -> Evaluation:
    y = np.asarray(y, dtype=int)
    if np.any(y < 0):
        raise ValueError("evaluation requires every test sample to be labeled")
    C = model.num_classes
    if X.shape[0] == 0:
        return Evaluation(0.0, np.zeros((C, C), dtype=int), np.zeros(0, dtype=int))
    pred = np.argmax(model.logits(encode_all(model, X)), axis=1)
    conf = np.zeros((C, C), dtype=int)
    np.add.at(conf, (y, pred), 1)
    return Evaluation(float(np.mean(pred == y)), conf, pred)


class SesarClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Semi-supervised sequence classifier with a reconstruction-trained latent space.

    ``fit`` takes sequences of shape (n_samples, T, n_features) and partial
    labels where -1 marks an unlabeled sample. ``transform`` returns the
    latent vectors used for clustering and sample selection.

    Parameters
    ----------
    n_classes : int or None
        Number of classes. Inferred from ``y`` when None, but active learning
        usually starts with few labels, so pass it explicitly.
    hidden_size, num_layers : int
        GRU width per direction and number of bidirectional layers.
    max_iter : int
        Optimizer steps per call to ``fit``.
    warm_start : bool
        Continue from the current weights on repeated ``fit`` calls.
    """

    def __init__(self, n_classes=None, hidden_size=64, num_layers=2, batch_size=32,
                 max_iter=2000, learning_rate=1e-4, decay=0.95, decay_interval=1000,
                 freeze_decoder=False, reconstruction_weight=1.0,
                 classification_weight=1.0, labeled_only=False, warm_start=False,
                 random_state=0):
        self.n_classes = n_classes
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.decay = decay
        self.decay_interval = decay_interval
        self.freeze_decoder = freeze_decoder
        self.reconstruction_weight = reconstruction_weight
        self.classification_weight = classification_weight
        self.labeled_only = labeled_only
        self.warm_start = warm_start
        self.random_state = random_state

    def _train_config(self, iterations=None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            iterations=self.max_iter if iterations is None else iterations,
            base_lr=self.learning_rate, decay=self.decay,
            decay_interval=self.decay_interval, seed=self.random_state or 0,
            freeze_decoder=self.freeze_decoder,
            recon_weight=self.reconstruction_weight,
            cla_weight=self.classification_weight, labeled_only=self.labeled_only)

    def fit(self, X, y=None, max_iter=None):
        X = check_sequences(X, min_length=1)
        n_classes = self.n_classes
        if n_classes is None:
            if y is None or np.max(y) < 0:
                raise ValueError("n_classes is required when no labels are given")
            n_classes = int(np.max(y)) + 1
        y = check_partial_labels(y, X.shape[0], n_classes)
        if not (self.warm_start and hasattr(self, "model_")):
            self.model_ = SesarModel(X.shape[2], n_classes, self.hidden_size,
                                     self.num_layers, seed=self.random_state or 0)
            self.classes_ = np.arange(n_classes)
            self.n_features_ = X.shape[2]
        elif X.shape[2] != self.n_features_:
            raise ValueError(f"X has {X.shape[2]} features, model was built for {self.n_features_}")
        self.pool_ = LabelPool.from_partial_labels(y)
        _, self.loss_curve_ = train(self.model_, X, self.pool_, self._train_config(max_iter))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return encode_all(self.model_, check_sequences(X))

    def decision_function(self, X):
        return self.model_.logits(self.transform(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
