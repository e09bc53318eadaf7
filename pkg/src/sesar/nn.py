"""Small numpy neural-network substrate: GRU, linear layers, losses, Adam.

Everything runs in float64 on batched arrays laid out as ``(batch, time,
features)``. Layers cache what they need during ``forward`` and accumulate
gradients into their :class:`Param` objects during ``backward``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit


class Param:
    """A named trainable array together with its accumulated gradient."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Linear:
    """Affine map ``y = x @ W + b``."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.W = Param(f"{name}.W", _uniform_init(rng, (in_features, out_features), in_features))
        self.b = Param(f"{name}.b", np.zeros(out_features))
        self._x = None

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected last dim {self.in_features}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        x2 = self._x.reshape(-1, self.in_features)
        dy2 = dy.reshape(-1, self.out_features)
        self.W.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return dy @ self.W.value.T


def _scan_forward(A: np.ndarray, U: np.ndarray, h0: np.ndarray):
    """GRU recurrence for G stacked independent cells.

    A: (G, B, T, 3h) input projections incl. bias; U: (G, h, 3h); h0: (G, B, h).
    """
    G, B, T, h3 = A.shape
    h = h3 // 3
    U_zr = np.ascontiguousarray(U[:, :, : 2 * h])
    U_h = np.ascontiguousarray(U[:, :, 2 * h:])
    hs = np.empty((G, B, T, h))
    zs = np.empty((G, B, T, h))
    rs = np.empty((G, B, T, h))
    cands = np.empty((G, B, T, h))
    hp = h0
    for t in range(T):
        a = A[:, :, t]
        zr = expit(a[..., : 2 * h] + hp @ U_zr)
        z = zr[..., :h]
        r = zr[..., h:]
        cand = np.tanh(a[..., 2 * h:] + (r * hp) @ U_h)
        hp = hp + z * (cand - hp)
        zs[:, :, t] = z
        rs[:, :, t] = r
        cands[:, :, t] = cand
        hs[:, :, t] = hp
    return hs, zs, rs, cands


def _scan_backward(dhs, U, h0, hs, zs, rs, cands):
    """Reverse pass of :func:`_scan_forward`; returns (dA, dU, dh0)."""
    G, B, T, h = hs.shape
    U_zr_T = np.ascontiguousarray(U[:, :, : 2 * h].transpose(0, 2, 1))
    U_h_T = np.ascontiguousarray(U[:, :, 2 * h:].transpose(0, 2, 1))
    dA = np.empty((G, B, T, 3 * h))
    dh = np.zeros((G, B, h))
    h_prev = np.concatenate([h0[:, :, None], hs[:, :, :-1]], axis=2)
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, :, t]
        hp = h_prev[:, :, t]
        z, r, cand = zs[:, :, t], rs[:, :, t], cands[:, :, t]
        da_h = dh * z * (1.0 - cand * cand)
        dh_next = dh * (1.0 - z)
        drh = da_h @ U_h_T
        dh_next += drh * r
        da_zr = dA[:, :, t, : 2 * h]
        da_zr[..., :h] = dh * (cand - hp) * z * (1.0 - z)
        da_zr[..., h:] = drh * hp * r * (1.0 - r)
        dh_next += da_zr @ U_zr_T
        dA[:, :, t, 2 * h:] = da_h
        dh = dh_next
    # recurrent weight grads as one contraction over (batch, time)
    hp_flat = h_prev.reshape(G, B * T, h).transpose(0, 2, 1)
    rh_flat = (rs * h_prev).reshape(G, B * T, h).transpose(0, 2, 1)
    dA_flat = dA.reshape(G, B * T, 3 * h)
    dU = np.concatenate([hp_flat @ dA_flat[..., : 2 * h], rh_flat @ dA_flat[..., 2 * h:]], axis=2)
    return dA, dU, dh


def _project(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``X @ W + b`` for (B, T, in) input, via one 2-D matmul."""
    B, T, _ = X.shape
    return (np.ascontiguousarray(X).reshape(B * T, -1) @ W + b).reshape(B, T, -1)


class GruLayer:
    """Single-direction GRU.

    Gate weights are stored stacked along the output axis in the order
    (update z, reset r, candidate h); ``W_z``, ``U_r``, ... expose views.

        z  = sigmoid(x W_z + h U_z + b_z)
        r  = sigmoid(x W_r + h U_r + b_r)
        h~ = tanh(x W_h + (r * h) U_h + b_h)
        h' = (1 - z) * h + z * h~
    """

    def __init__(self, name: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        h = hidden_size
        self.input_size = input_size
        self.hidden_size = h
        W = np.concatenate([_uniform_init(rng, (input_size, h), input_size) for _ in range(3)], axis=1)
        U = np.concatenate([_uniform_init(rng, (h, h), h) for _ in range(3)], axis=1)
        self.W = Param(f"{name}.W", W)
        self.U = Param(f"{name}.U", U)
        self.b = Param(f"{name}.b", np.zeros(3 * h))
        self._cache = None

    # gate views, for inspection and tests
    W_z = property(lambda self: self.W.value[:, : self.hidden_size])
    W_r = property(lambda self: self.W.value[:, self.hidden_size: 2 * self.hidden_size])
    W_h = property(lambda self: self.W.value[:, 2 * self.hidden_size:])
    U_z = property(lambda self: self.U.value[:, : self.hidden_size])
    U_r = property(lambda self: self.U.value[:, self.hidden_size: 2 * self.hidden_size])
    U_h = property(lambda self: self.U.value[:, 2 * self.hidden_size:])
    b_z = property(lambda self: self.b.value[: self.hidden_size])
    b_r = property(lambda self: self.b.value[self.hidden_size: 2 * self.hidden_size])
    b_h = property(lambda self: self.b.value[2 * self.hidden_size:])

    def params(self) -> list[Param]:
        return [self.W, self.U, self.b]

    def _check_input(self, X: np.ndarray) -> None:
        if X.ndim != 3 or X.shape[2] != self.input_size:
            raise ValueError(f"expected (B, T, {self.input_size}) input, got {X.shape}")

    def forward(self, X: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
        """Run over ``X`` of shape (B, T, input_size); return all states (B, T, h)."""
        self._check_input(X)
        B = X.shape[0]
        h = self.hidden_size
        if h0 is None:
            h0 = np.zeros((B, h))
        elif h0.shape != (B, h):
            raise ValueError(f"expected h0 of shape {(B, h)}, got {h0.shape}")
        A = _project(X, self.W.value, self.b.value)
        states = _scan_forward(A[None], self.U.value[None], h0[None])
        self._cache = (X, h0, states)
        return states[0][0]

    def backward(self, dhs: np.ndarray, need_input_grad: bool = True):
        """Backprop through time given dLoss/dhs; return (dX, dh0)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        X, h0, (hs, zs, rs, cands) = self._cache
        dA, dU, dh0 = _scan_backward(dhs[None], self.U.value[None], h0[None], hs, zs, rs, cands)
        self._accumulate(X, dA[0], dU[0])
        dX = _project(dA[0], self.W.value.T, 0.0) if need_input_grad else None
        return dX, dh0[0]

    def _accumulate(self, X: np.ndarray, dA: np.ndarray, dU: np.ndarray) -> None:
        self.U.grad += dU
        dA2 = dA.reshape(-1, 3 * self.hidden_size)
        self.W.grad += X.reshape(dA2.shape[0], -1).T @ dA2
        self.b.grad += dA2.sum(axis=0)


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray, layer: GruLayer) -> np.ndarray:
    """One GRU step for a single (unbatched) input vector."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape != (layer.input_size,) or h_prev.shape != (layer.hidden_size,):
        raise ValueError("gru_cell: shape mismatch")
    return layer.forward(x_t[None, None, :], h_prev[None, :])[0, 0]


class BiGruEncoder:
    """Stack of bidirectional GRU layers.

    Each layer's output at time t is ``[forward_t, backward_t]``; the latent
    vector is the top layer's forward state at t=T joined with its backward
    state at t=1, so its size is ``2 * hidden_size``.
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int,
                 rng: np.random.Generator | None = None, name: str = "enc"):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.layers: list[tuple[GruLayer, GruLayer]] = []
        size = input_size
        for i in range(num_layers):
            fwd = GruLayer(f"{name}.{i}.fwd", size, hidden_size, rng)
            bwd = GruLayer(f"{name}.{i}.bwd", size, hidden_size, rng)
            self.layers.append((fwd, bwd))
            size = 2 * hidden_size
        self._T = None

    @property
    def latent_size(self) -> int:
        return 2 * self.hidden_size

    def params(self) -> list[Param]:
        return [p for pair in self.layers for layer in pair for p in layer.params()]

    def forward(self, X: np.ndarray) -> np.ndarray:
        if X.ndim != 3 or X.shape[2] != self.input_size:
            raise ValueError(f"expected (B, T, {self.input_size}) input, got {X.shape}")
        B, T, _ = X.shape
        h = self.hidden_size
        inp = X
        self._caches = []
        for fwd, bwd in self.layers:
            # both directions run as one stacked scan; the backward cell sees reversed time
            A = np.stack([_project(inp, fwd.W.value, fwd.b.value),
                          _project(inp[:, ::-1], bwd.W.value, bwd.b.value)])
            U = np.stack([fwd.U.value, bwd.U.value])
            h0 = np.zeros((2, B, h))
            states = _scan_forward(A, U, h0)
            self._caches.append((inp, U, h0, states))
            hs = states[0]
            inp = np.concatenate([hs[0], hs[1][:, ::-1]], axis=2)
        self._T = T
        return np.concatenate([inp[:, -1, :h], inp[:, 0, h:]], axis=1)

    def backward(self, dH: np.ndarray, need_input_grad: bool = False):
        if self._T is None:
            raise RuntimeError("backward called before forward")
        h = self.hidden_size
        B, T = dH.shape[0], self._T
        dout = np.zeros((B, T, 2 * h))
        dout[:, -1, :h] = dH[:, :h]
        dout[:, 0, h:] = dH[:, h:]
        dX = None
        for i in range(len(self.layers) - 1, -1, -1):
            fwd, bwd = self.layers[i]
            inp, U, h0, (hs, zs, rs, cands) = self._caches[i]
            dhs = np.stack([dout[:, :, :h], dout[:, ::-1, h:]])
            dA, dU, _ = _scan_backward(dhs, U, h0, hs, zs, rs, cands)
            fwd._accumulate(inp, dA[0], dU[0])
            bwd._accumulate(inp[:, ::-1], dA[1], dU[1])
            if i > 0 or need_input_grad:
                dX = _project(dA[0], fwd.W.value.T, 0.0) + _project(dA[1], bwd.W.value.T, 0.0)[:, ::-1]
                dout = dX
        return dX


class GruDecoder:
    """Weakened decoder: GRU seeded with the latent state and fed zeros."""

    def __init__(self, latent_size: int, output_size: int,
                 rng: np.random.Generator | None = None, name: str = "dec"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_size = latent_size
        self.output_size = output_size
        self.gru = GruLayer(f"{name}.gru", output_size, latent_size, rng)
        self.readout = Linear(f"{name}.readout", latent_size, output_size, rng)

    def params(self) -> list[Param]:
        return self.gru.params() + self.readout.params()

    def forward(self, H: np.ndarray, T: int) -> np.ndarray:
        if T < 1:
            raise ValueError("T must be >= 1")
        if H.ndim != 2 or H.shape[1] != self.latent_size:
            raise ValueError(f"expected latent of width {self.latent_size}, got {H.shape}")
        zeros = np.zeros((H.shape[0], T, self.output_size))
        hs = self.gru.forward(zeros, H)
        return self.readout.forward(hs)

    def backward(self, dXhat: np.ndarray) -> np.ndarray:
        dhs = self.readout.backward(dXhat)
        _, dH = self.gru.backward(dhs, need_input_grad=False)
        return dH


def encode(seq: np.ndarray, encoder: BiGruEncoder) -> np.ndarray:
    """Latent vector for one (T, F) frame matrix."""
    return encoder.forward(np.asarray(seq, dtype=np.float64)[None])[0]


def decode(H: np.ndarray, T: int, decoder: GruDecoder) -> np.ndarray:
    """Reconstructed (T, F) frames from one latent vector."""
    return decoder.forward(np.asarray(H, dtype=np.float64)[None], T)[0]


def classify(H: np.ndarray, layer: Linear) -> np.ndarray:
    return layer.forward(np.asarray(H, dtype=np.float64))


def l1_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean absolute error over every entry."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.abs(x - x_hat).mean())


def cross_entropy(logits: np.ndarray, y: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[-1]:
        raise ValueError(f"class index {y} out of range for {logits.shape[-1]} classes")
    return float(-log_softmax(logits)[y])


@dataclass
class AdamState:
    """Adam moments plus a step-decay learning-rate schedule."""

    base_lr: float = 1e-4
    decay: float = 0.95
    decay_interval: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, iteration: int) -> float:
        return self.base_lr * self.decay ** (iteration // self.decay_interval)

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr, "decay": self.decay,
            "decay_interval": self.decay_interval, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": {k: _array_to_json(a) for k, a in self.m.items()},
            "v": {k: _array_to_json(a) for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        d = dict(d)
        m = {k: _array_from_json(a) for k, a in d.pop("m").items()}
        v = {k: _array_from_json(a) for k, a in d.pop("v").items()}
        return cls(m=m, v=v, **d)


def adam_step(params: Iterable[Param], state: AdamState) -> None:
    """One Adam update at ``state.step``; gradients are zeroed afterwards.

    Frozen params are skipped but still have their gradients cleared.
    """
    lr = state.lr_at(state.step)
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.frozen:
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = np.zeros_like(p.value)
                state.v[p.name] = np.zeros_like(p.value)
            v = state.v[p.name]
            g = p.grad
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
    state.step = t


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple[str, int] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} over "
                f"{self.n_checked} coords (tol {self.tolerance:g}, worst {self.worst})")


def grad_check(closure: Callable[[], "float | np.ndarray"], params: list[Param],
               tolerance: float = 1e-3, n_coords: int = 200, eps: float = 1e-5,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``closure`` runs forward and backward and returns the loss, either as a
    scalar or as a vector of terms whose sum is the loss. With terms, the
    +eps/-eps evaluations are differenced term by term before summing, which
    keeps roundoff in a large total from swamping small gradients. Relative
    error is ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)``.
    """
    for p in params:
        p.zero_grad()
    closure()
    analytic = {p.name: p.grad.copy() for p in params}

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst_err, worst = 0.0, None
    for i, j in coords:
        p = params[i]
        flat = p.value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        lp = np.asarray(closure(), dtype=np.float64)
        flat[j] = orig - eps
        lm = np.asarray(closure(), dtype=np.float64)
        flat[j] = orig
        g_num = math.fsum((lp - lm).reshape(-1)) / (2.0 * eps)
        g_an = analytic[p.name].reshape(-1)[j]
        err = abs(g_an - g_num) / max(1e-8, abs(g_an) + abs(g_num))
        if err > worst_err or worst is None:
            worst_err, worst = err, (p.name, int(j))
    for p in params:
        p.zero_grad()
    return GradCheckReport(float(worst_err), len(coords), tolerance, worst)


def _array_to_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _array_from_json(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, params: Iterable[Param], state: AdamState | None = None,
                    iteration: int = 0, extra: dict | None = None) -> None:
    doc = {
        "params": {p.name: _array_to_json(p.value) for p in params},
        "optimizer": state.to_dict() if state is not None else None,
        "iteration": iteration,
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, params: Iterable[Param]) -> tuple[AdamState | None, int, dict]:
    """Load values into ``params`` in place; return (optimizer, iteration, extra)."""
    with open(path) as fh:
        doc = json.load(fh)
    stored = doc["params"]
    for p in params:
        if p.name not in stored:
            raise KeyError(f"checkpoint has no parameter {p.name!r}")
        arr = _array_from_json(stored[p.name])
        if arr.shape != p.value.shape:
            raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != {p.value.shape}")
        p.value[...] = arr
    opt = doc.get("optimizer")
    return (AdamState.from_dict(opt) if opt else None), doc.get("iteration", 0), doc.get("extra", {})
