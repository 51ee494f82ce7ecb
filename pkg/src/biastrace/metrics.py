"""Bias metrics on probabilistic outputs.

The central quantity is the Wasserstein-1 distance between the per-group
distributions of the model's output probabilities, instantiated for
statistical parity (all test nodes) and equal opportunity (ground-truth
positives only). Binary tasks use the scalar class-1 probability, which
makes the 1-D distance exact and its subgradient crisp; multi-class runs
go through entropic (Sinkhorn) transport on full probability vectors.

Gradients w.r.t. model parameters hold the converged matching/plan fixed
(an envelope approximation, noted in every report) and backpropagate the
transport signs through the softmax into the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from . import model as mdl
from .graphs import Graph

GRADIENT_RULE = "envelope-fixed-matching"


class ConvergenceError(RuntimeError):
    """Sinkhorn marginals did not reach the requested tolerance."""


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Uniformly weighted samples in R^k (k=1 for binary tasks)."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.size == 0:
            raise ValueError("empty distribution")
        if not np.isfinite(arr).all():
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", arr)

    @property
    def k(self) -> int:
        return int(self.samples.shape[1])


def _as_samples(dist) -> np.ndarray:
    if isinstance(dist, EmpiricalDistribution):
        return dist.samples
    return EmpiricalDistribution(dist).samples


def _matched_segments(na: int, nb: int):
    """Piecewise-constant quantile matching of two uniform sample sets.

    Returns (ia, ib, w): sample indices per segment and segment masses.
    Breakpoints are handled in integer units of 1/(na*nb), so the matching
    is exact for any size pair.
    """
    ia, ib, w = [], [], []
    i = j = cur = 0
    while i < na and j < nb:
        step_a = (i + 1) * nb
        step_b = (j + 1) * na
        nxt = min(step_a, step_b)
        ia.append(i)
        ib.append(j)
        w.append(nxt - cur)
        if step_a == nxt:
            i += 1
        if step_b == nxt:
            j += 1
        cur = nxt
    return (np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64),
            np.array(w, dtype=np.float64) / (na * nb))


def wasserstein_1d(a, b) -> float:
    """Exact Wasserstein-1 distance between 1-D uniform sample sets via the
    quantile-function integral (unequal sizes use exact segment matching)."""
    xa = _as_samples(a)
    xb = _as_samples(b)
    if xa.shape[1] != 1 or xb.shape[1] != 1:
        raise ValueError("wasserstein_1d needs scalar samples")
    sa = np.sort(xa[:, 0])
    sb = np.sort(xb[:, 0])
    ia, ib, w = _matched_segments(len(sa), len(sb))
    return float(np.sum(w * np.abs(sa[ia] - sb[ib])))


def sinkhorn_distance(a, b, reg: float = 1e-3, iters: int = 500,
                      tol: float = 1e-6):
    """Entropically regularized transport with |x-y|_1 cost, log-domain.

    Returns (distance, plan) where distance = <plan, cost> and the plan's
    marginals match the uniform weights within `tol` (else raises
    ConvergenceError).
    """
    if reg <= 0:
        raise ValueError("reg must be > 0")
    xa = _as_samples(a)
    xb = _as_samples(b)
    na, nb = len(xa), len(xb)
    cost = cdist(xa, xb, metric="cityblock")
    log_a = np.full(na, -np.log(na))
    log_b = np.full(nb, -np.log(nb))
    f = np.zeros(na)
    g = np.zeros(nb)
    err = np.inf
    for _ in range(int(iters)):
        f = -reg * logsumexp((g[None, :] - cost) / reg + log_b[None, :], axis=1)
        g = -reg * logsumexp((f[:, None] - cost) / reg + log_a[:, None], axis=0)
        log_plan = (f[:, None] + g[None, :] - cost) / reg + log_a[:, None] + log_b[None, :]
        err = np.abs(np.exp(logsumexp(log_plan, axis=1)) - 1.0 / na).max()
        if err <= tol:
            break
    if err > tol:
        raise ConvergenceError(
            f"sinkhorn marginals off by {err:.3e} after {iters} iterations (tol {tol:.1e})")
    plan = np.exp(log_plan)
    return float((plan * cost).sum()), plan


def _resolve_mask(graph: Graph, mask) -> np.ndarray:
    if mask is None:
        ids = graph.test_ids
    else:
        arr = np.asarray(mask)
        ids = np.flatnonzero(arr) if arr.dtype == bool else arr.astype(np.int64)
    if ids.size == 0:
        raise ValueError("empty evaluation mask")
    return ids


def _group_ids(graph: Graph, ids: np.ndarray, positives_only: bool):
    values = np.unique(graph.s[ids])
    groups = []
    for val in values:
        sub = ids[graph.s[ids] == val]
        if positives_only:
            sub = sub[graph.y[sub] == 1]
        if sub.size == 0:
            cell = f"(S={int(val)}, Y=1)" if positives_only else f"S={int(val)}"
            raise ValueError(f"group {cell} is empty in the evaluation mask")
        groups.append((int(val), sub))
    return groups


def _group_samples(probs: np.ndarray, sub: np.ndarray) -> np.ndarray:
    if probs.shape[1] == 2:
        return probs[sub, 1:2]
    return probs[sub]


def _pair_distance(xa, xb, reg, iters, tol) -> float:
    if xa.shape[1] == 1:
        return wasserstein_1d(xa, xb)
    return sinkhorn_distance(xa, xb, reg=reg, iters=iters, tol=tol)[0]


def disparity_sp(preds, graph: Graph, mask=None, reg: float = 1e-3,
                 iters: int = 500, tol: float = 1e-6) -> float:
    """Statistical-parity disparity: transport distance between the two
    sensitive groups' output distributions on the mask (default: test set)."""
    probs = preds.probs if isinstance(preds, mdl.Predictions) else np.asarray(preds)
    ids = _resolve_mask(graph, mask)
    groups = _group_ids(graph, ids, positives_only=False)
    if len(groups) != 2:
        raise ValueError(
            f"statistical-parity disparity needs exactly 2 groups, found {len(groups)}; "
            "use disparity_generalized for more")
    xa = _group_samples(probs, groups[0][1])
    xb = _group_samples(probs, groups[1][1])
    return _pair_distance(xa, xb, reg, iters, tol)


def disparity_eo(preds, graph: Graph, mask=None, reg: float = 1e-3,
                 iters: int = 500, tol: float = 1e-6) -> float:
    """Equal-opportunity disparity: same as disparity_sp restricted to
    ground-truth-positive nodes."""
    probs = preds.probs if isinstance(preds, mdl.Predictions) else np.asarray(preds)
    ids = _resolve_mask(graph, mask)
    groups = _group_ids(graph, ids, positives_only=True)
    if len(groups) != 2:
        raise ValueError("equal-opportunity disparity needs exactly 2 groups")
    xa = _group_samples(probs, groups[0][1])
    xb = _group_samples(probs, groups[1][1])
    return _pair_distance(xa, xb, reg, iters, tol)


def disparity_generalized(preds, graph: Graph, mask=None, reg: float = 1e-3,
                          iters: int = 500, tol: float = 1e-6) -> float:
    """Mean pairwise transport distance across all sensitive groups."""
    probs = preds.probs if isinstance(preds, mdl.Predictions) else np.asarray(preds)
    ids = _resolve_mask(graph, mask)
    groups = _group_ids(graph, ids, positives_only=False)
    if len(groups) < 2:
        raise ValueError("need at least 2 sensitive groups")
    total = 0.0
    pairs = 0
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            xa = _group_samples(probs, groups[i][1])
            xb = _group_samples(probs, groups[j][1])
            total += _pair_distance(xa, xb, reg, iters, tol)
            pairs += 1
    return total / pairs


def disparity_mix(preds, graph: Graph, mask=None, lam: float = 0.5, **kw) -> float:
    """Convex combination lam * SP + (1 - lam) * EO."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    sp = disparity_sp(preds, graph, mask, **kw) if lam > 0.0 else 0.0
    eo = disparity_eo(preds, graph, mask, **kw) if lam < 1.0 else 0.0
    return lam * sp + (1.0 - lam) * eo


def disparity(preds, graph: Graph, kind: str, mask=None, lam: float = 0.5, **kw) -> float:
    if kind == "sp":
        return disparity_sp(preds, graph, mask, **kw)
    if kind == "eo":
        return disparity_eo(preds, graph, mask, **kw)
    if kind == "generalized":
        return disparity_generalized(preds, graph, mask, **kw)
    if kind == "mix":
        return disparity_mix(preds, graph, mask, lam=lam, **kw)
    raise ValueError(f"unknown disparity kind {kind!r}")


def _sorted_matching_cotangent(probs, ga, gb, cot):
    """Accumulate +-mass signs of the fixed 1-D optimal matching into the
    class-1 probability cotangent. Ties in value break by node id (stable)."""
    va = probs[ga, 1]
    vb = probs[gb, 1]
    oa = np.argsort(va, kind="stable")
    ob = np.argsort(vb, kind="stable")
    ia, ib, w = _matched_segments(len(ga), len(gb))
    sign = np.sign(va[oa][ia] - vb[ob][ib])
    np.add.at(cot[:, 1], ga[oa][ia], w * sign)
    np.add.at(cot[:, 1], gb[ob][ib], -w * sign)


def _sinkhorn_cotangent(probs, ga, gb, cot, reg, iters, tol):
    """Envelope gradient of <plan, cost> through the samples, plan fixed."""
    xa = probs[ga]
    xb = probs[gb]
    _, plan = sinkhorn_distance(xa, xb, reg=reg, iters=iters, tol=tol)
    diff_sign = np.sign(xa[:, None, :] - xb[None, :, :])
    cot[ga] += np.einsum("uv,uvk->uk", plan, diff_sign)
    cot[gb] -= np.einsum("uv,uvk->vk", plan, diff_sign)


def disparity_gradient(params: mdl.Parameters, graph: Graph, kind: str = "sp",
                       mask=None, lam: float = 0.5, method: str = "auto",
                       reg: float = 1e-3, iters: int = 500,
                       tol: float = 1e-6) -> np.ndarray:
    """Gradient of the chosen disparity w.r.t. the flat parameter vector.

    The transport matching (sorted pairing for binary tasks, converged
    Sinkhorn plan otherwise) is held fixed while the signs backpropagate
    through the probabilities into theta.
    """
    if kind == "mix":
        g_sp = disparity_gradient(params, graph, "sp", mask, lam, method, reg, iters, tol)
        g_eo = disparity_gradient(params, graph, "eo", mask, lam, method, reg, iters, tol)
        return lam * g_sp + (1.0 - lam) * g_eo

    state = mdl.evaluate(params, graph)
    probs = state.probs
    ids = _resolve_mask(graph, mask)
    groups = _group_ids(graph, ids, positives_only=(kind == "eo"))
    if kind in ("sp", "eo") and len(groups) != 2:
        raise ValueError("sp/eo gradients need exactly 2 groups")
    if method == "auto":
        method = "sorted" if probs.shape[1] == 2 else "sinkhorn"

    cot = np.zeros_like(probs)
    if kind == "generalized":
        pair_list = [(groups[i][1], groups[j][1])
                     for i in range(len(groups)) for j in range(i + 1, len(groups))]
        scale = 1.0 / len(pair_list)
    else:
        pair_list = [(groups[0][1], groups[1][1])]
        scale = 1.0
    for ga, gb in pair_list:
        if method == "sorted":
            if probs.shape[1] != 2:
                raise ValueError("the sorted-matching gradient needs a binary task")
            _sorted_matching_cotangent(probs, ga, gb, cot)
        elif method == "sinkhorn":
            _sinkhorn_cotangent(probs, ga, gb, cot, reg, iters, tol)
        else:
            raise ValueError(f"unknown gradient method {method!r}")
    return scale * mdl.prob_backward(params, graph, cot)


def label_metrics(preds, graph: Graph, mask=None):
    """(sp_gap, eo_gap, accuracy) from hard argmax labels on the mask."""
    probs = preds.probs if isinstance(preds, mdl.Predictions) else np.asarray(preds)
    ids = _resolve_mask(graph, mask)
    labels = probs[ids].argmax(axis=1)
    y = graph.y[ids]
    accuracy = float((labels == y).mean())

    rates = {}
    rates_pos = {}
    for val, sub in _group_ids(graph, ids, positives_only=False):
        local = np.isin(ids, sub)
        rates[val] = float((labels[local] == 1).mean())
    for val, sub in _group_ids(graph, ids, positives_only=True):
        local = np.isin(ids, sub)
        rates_pos[val] = float((labels[local] == 1).mean())
    if len(rates) != 2 or len(rates_pos) != 2:
        raise ValueError("label metrics need exactly 2 sensitive groups")
    (r0, r1), (p0, p1) = rates.values(), rates_pos.values()
    return abs(r0 - r1), abs(p0 - p1), accuracy


@dataclass(frozen=True)
class BiasReport:
    """One trained model's bias summary on a fixed evaluation mask."""

    disparity_sp: float
    disparity_eo: float
    disparity_generalized: float
    sp_gap: float
    eo_gap: float
    accuracy: float

    def mixed(self, lam: float = 0.5) -> float:
        return lam * self.disparity_sp + (1.0 - lam) * self.disparity_eo

    def to_kv(self) -> list[str]:
        return [
            f"disparity_sp = {self.disparity_sp!r}",
            f"disparity_eo = {self.disparity_eo!r}",
            f"disparity_generalized = {self.disparity_generalized!r}",
            f"sp_gap = {self.sp_gap!r}",
            f"eo_gap = {self.eo_gap!r}",
            f"accuracy = {self.accuracy!r}",
            f"gradient_rule = {GRADIENT_RULE}",
        ]


def bias_report(preds, graph: Graph, mask=None, reg: float = 1e-3,
                iters: int = 500, tol: float = 1e-6) -> BiasReport:
    sp_gap, eo_gap, acc = label_metrics(preds, graph, mask)
    return BiasReport(
        disparity_sp=disparity_sp(preds, graph, mask, reg=reg, iters=iters, tol=tol),
        disparity_eo=disparity_eo(preds, graph, mask, reg=reg, iters=iters, tol=tol),
        disparity_generalized=disparity_generalized(preds, graph, mask, reg=reg,
                                                    iters=iters, tol=tol),
        sp_gap=sp_gap,
        eo_gap=eo_gap,
        accuracy=acc,
    )
