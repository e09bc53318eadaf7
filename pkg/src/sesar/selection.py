"""Information measures and the acquisition strategies.

Every selector returns unlabeled indices only, without duplicates, and breaks
ties by the lowest sample index so that selections are a deterministic
function of their inputs. Logarithms are natural.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .clustering import ClusterBudgets, ClusterModel
from .dataset import LabelPool
from .nn import AdamState, Linear, adam_step

LN2 = float(np.log(2.0))


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(p, q).shape)
    mask = np.broadcast_to(p > 0, out.shape)
    pb = np.broadcast_to(p, out.shape)
    qb = np.broadcast_to(q, out.shape)
    out[mask] = pb[mask] * np.log(pb[mask] / qb[mask])
    return out


def kl(p, q) -> float | np.ndarray:
    """KL(p || q) along the last axis, with 0 * log(0 / q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    res = _xlogy_ratio(p, q).sum(axis=-1)
    return float(res) if res.ndim == 0 else res


def js(p_l, p_u) -> float | np.ndarray:
    """Jensen-Shannon divergence; bounded by ln 2."""
    p_l = np.asarray(p_l, dtype=np.float64)
    p_u = np.asarray(p_u, dtype=np.float64)
    if p_l.shape[-1] != p_u.shape[-1]:
        raise ValueError(f"length mismatch: {p_l.shape[-1]} vs {p_u.shape[-1]}")
    p_z = 0.5 * (p_l + p_u)
    res = 0.5 * _xlogy_ratio(p_l, p_z).sum(axis=-1) + 0.5 * _xlogy_ratio(p_u, p_z).sum(axis=-1)
    return float(res) if res.ndim == 0 else res


def _check_dist(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)) or \
            not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("not a probability distribution")
    return p


def entropy(p) -> float | np.ndarray:
    p = _check_dist(p)
    res = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
    return float(res) if res.ndim == 0 else res


def variance_ratio(p) -> float | np.ndarray:
    """1 - max class probability (larger means more uncertain)."""
    p = _check_dist(p)
    res = 1.0 - p.max(axis=-1)
    return float(res) if res.ndim == 0 else res


UNCERTAINTY = {"ep": entropy, "vr": variance_ratio}


@dataclass
class SelectionResult:
    strategy: str
    chosen: list
    diagnostics: list = field(default_factory=list)

    def to_dict(self, round_index: int | None = None) -> dict:
        return {"strategy": self.strategy, "round": round_index,
                "chosen": [int(i) for i in self.chosen], "diagnostics": self.diagnostics}


def _order(keys: np.ndarray, idx: np.ndarray, descending: bool = False) -> np.ndarray:
    """Sort ``idx`` by ``keys``; ties go to the lower index."""
    k = -keys if descending else keys
    return idx[np.lexsort((idx, k))]


def select_uniform(pool: LabelPool, budget: int, seed=0) -> SelectionResult:
    if budget < 0:
        raise ValueError("budget must be non-negative")
    unl = np.array(pool.unlabeled, dtype=int)
    k = min(budget, unl.size)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(unl, size=k, replace=False) if k else np.zeros(0, dtype=int)
    return SelectionResult("u", [int(i) for i in chosen], [{"strategy": "u"} for _ in chosen])


def _nearest_unlabeled(cm: ClusterModel, c: int, unl_mask: np.ndarray, k: int) -> np.ndarray:
    members = cm.members(c)
    members = members[unl_mask[members]]
    return _order(cm.distance[members], members)[:k]


def select_kt(cm: ClusterModel, bgts: ClusterBudgets, pool: LabelPool) -> SelectionResult:
    """Per cluster, the unlabeled members closest to the centroid."""
    unl_mask = np.zeros(cm.assignment.size, dtype=bool)
    unl_mask[list(pool.unlabeled)] = True
    chosen, diag = [], []
    for c in range(cm.n_clusters):
        for i in _nearest_unlabeled(cm, c, unl_mask, int(bgts.counts[c])):
            chosen.append(int(i))
            diag.append({"strategy": "kt", "cluster": c, "distance": float(cm.distance[i])})
    return SelectionResult("kt", chosen, diag)


def select_kjs(cm: ClusterModel, bgts: ClusterBudgets, pool: LabelPool, probs,
               uncertainty_kind: str = "ep") -> SelectionResult:
    """Cluster-wise selection by dissimilarity to labeled samples, then uncertainty.

    In a cluster without labeled members this reduces to nearest-to-centre.
    Otherwise each unlabeled member is scored by its smallest JS divergence to
    the cluster's labeled members; the 2n most dissimilar are kept and the n
    most uncertain of those are chosen.
    """
    probs = np.asarray(probs, dtype=np.float64)
    uncertainty = UNCERTAINTY[uncertainty_kind]
    unl_mask = np.zeros(cm.assignment.size, dtype=bool)
    unl_mask[list(pool.unlabeled)] = True
    chosen, diag = [], []
    for c in range(cm.n_clusters):
        n_c = int(bgts.counts[c])
        if n_c == 0:
            continue
        members = cm.members(c)
        lab = members[~unl_mask[members]]
        unl = members[unl_mask[members]]
        if lab.size == 0:
            for i in _nearest_unlabeled(cm, c, unl_mask, n_c):
                chosen.append(int(i))
                diag.append({"strategy": "kjs", "cluster": c,
                             "distance": float(cm.distance[i])})
            continue
        # (unlabeled, labeled) divergence table, then min over labeled
        sim = js(probs[lab][None, :, :], probs[unl][:, None, :]).min(axis=1)
        ranked = _order(sim, unl, descending=True)
        sim_of = dict(zip(unl.tolist(), sim.tolist()))
        cand = ranked[: 2 * n_c]
        u = np.atleast_1d(uncertainty(probs[cand]))
        u_of = dict(zip(cand.tolist(), u.tolist()))
        for i in _order(u, cand, descending=True)[:n_c]:
            chosen.append(int(i))
            diag.append({"strategy": "kjs", "cluster": c, "distance": float(cm.distance[i]),
                         "similarity": sim_of[int(i)], "uncertainty": u_of[int(i)]})
    return SelectionResult("kjs", chosen, diag)


def select_coreset(latents, pool: LabelPool, budget: int) -> SelectionResult:
    """Farthest-first traversal seeded with the labeled points."""
    Z = np.asarray(latents, dtype=np.float64)
    if budget < 0:
        raise ValueError("budget must be non-negative")
    unl = np.array(pool.unlabeled, dtype=int)
    budget = min(budget, unl.size)
    chosen, diag = [], []
    if budget == 0:
        return SelectionResult("cs", chosen, diag)
    available = np.zeros(Z.shape[0], dtype=bool)
    available[unl] = True
    mind = np.full(Z.shape[0], np.inf)
    for j in pool.labeled:
        mind = np.minimum(mind, np.linalg.norm(Z - Z[j], axis=1))
    if not pool.labeled:
        first = int(unl.min())
        chosen.append(first)
        diag.append({"strategy": "cs", "radius": None})
        available[first] = False
        mind = np.linalg.norm(Z - Z[first], axis=1)
    while len(chosen) < budget:
        scores = np.where(available, mind, -np.inf)
        pick = int(np.argmax(scores))  # first maximum = lowest index
        chosen.append(pick)
        diag.append({"strategy": "cs", "radius": float(mind[pick])})
        available[pick] = False
        mind = np.minimum(mind, np.linalg.norm(Z - Z[pick], axis=1))
    return SelectionResult("cs", chosen, diag)


def covering_radius(latents, centers) -> float:
    Z = np.asarray(latents, dtype=np.float64)
    centers = list(centers)
    if not centers:
        return float("inf")
    d = np.linalg.norm(Z[:, None, :] - Z[centers][None, :, :], axis=2)
    return float(d.min(axis=1).max())


class _Discriminator:
    """One-hidden-layer MLP giving P(labeled | latent)."""

    def __init__(self, in_features: int, width: int, rng):
        self.l1 = Linear("dis.l1", in_features, width, rng)
        self.l2 = Linear("dis.l2", width, 1, rng)

    def params(self):
        return self.l1.params() + self.l2.params()

    def forward(self, Z):
        a = self.l1.forward(Z)
        self._mask = a > 0
        return self.l2.forward(a * self._mask)[:, 0]

    def backward(self, dlogit):
        da = self.l2.backward(dlogit[:, None]) * self._mask
        self.l1.backward(da)


def select_dis(latents, pool: LabelPool, budget: int, seed=0, width: int = 64,
               iterations: int = 500, lr: float = 1e-3) -> SelectionResult:
    """Pick the unlabeled samples a labeled-vs-unlabeled discriminator finds least labeled-like.

    Falls back to uniform sampling when nothing is labeled yet.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if not pool.labeled:
        res = select_uniform(pool, budget, seed)
        return SelectionResult("dis", res.chosen,
                               [{"strategy": "dis", "fallback": "u"} for _ in res.chosen])
    Z = np.asarray(latents, dtype=np.float64)
    unl = np.array(pool.unlabeled, dtype=int)
    budget = min(budget, unl.size)
    if budget == 0:
        return SelectionResult("dis", [], [])
    mu, sd = Z.mean(axis=0), Z.std(axis=0)
    Zs = (Z - mu) / np.where(sd > 0, sd, 1.0)
    target = np.zeros(Z.shape[0])
    target[list(pool.labeled)] = 1.0
    # balance the two classes in the loss
    n_lab, n_unl = len(pool.labeled), unl.size
    weight = np.where(target == 1.0, 0.5 / n_lab, 0.5 / max(n_unl, 1))

    rng = np.random.default_rng(seed)
    net = _Discriminator(Z.shape[1], width, rng)
    opt = AdamState(base_lr=lr, decay=1.0)
    params = net.params()
    for _ in range(iterations):
        logit = net.forward(Zs)
        p = expit(logit)
        net.backward(weight * (p - target))
        adam_step(params, opt)
    p_lab = expit(net.forward(Zs[unl]))
    order = _order(p_lab, unl)[:budget]
    p_of = dict(zip(unl.tolist(), p_lab.tolist()))
    return SelectionResult("dis", [int(i) for i in order],
                           [{"strategy": "dis", "p_labeled": p_of[int(i)]} for i in order])
