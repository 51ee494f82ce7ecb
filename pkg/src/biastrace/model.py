"""Graph node classifier with one mean-aggregation step and closed-form
loss, gradient, Hessian-vector and inverse-Hessian-vector products.

Two architectures share the same structure logits = A_hat @ M:

* "linear-softmax": M = X @ W. Convex objective, exact Hessian. This is the
  default for influence work.
* "one-hidden": M = relu(X @ W1) @ W2 with a Gauss-Newton curvature
  approximation (positive semidefinite by construction).

A_hat is the row-normalized adjacency with self loops. The training
objective is mean cross-entropy over the training nodes plus a ridge term
0.5 * damping * ||theta||^2; the same damping appears in every curvature
product, so the damped Hessian is positive definite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .graphs import Graph, normalized_adjacency

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
NEWTON_MAX_STEPS = 40
PARAMS_FORMAT_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    """Training loss became non-finite; carries the offending epoch."""

    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class SolverError(RuntimeError):
    """Inverse-curvature solve did not reach the requested residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Parameters:
    """Flat parameter vector plus the shape metadata needed to unflatten."""

    theta: np.ndarray
    shapes: tuple[tuple[int, int], ...]
    arch: str
    damping: float

    def __post_init__(self):
        want = sum(a * b for a, b in self.shapes)
        if self.theta.shape != (want,):
            raise ValueError(f"theta has {self.theta.shape[0]} entries, shapes imply {want}")
        if not np.isfinite(self.theta).all():
            raise ValueError("parameters must be finite")

    @property
    def size(self) -> int:
        return int(self.theta.shape[0])

    def matrices(self) -> list[np.ndarray]:
        out, k = [], 0
        for a, b in self.shapes:
            out.append(self.theta[k:k + a * b].reshape(a, b))
            k += a * b
        return out


@dataclass(frozen=True)
class Predictions:
    """Row-stochastic class probabilities plus the raw logits."""

    logits: np.ndarray
    probs: np.ndarray


def flatten(mats) -> np.ndarray:
    return np.concatenate([m.ravel() for m in mats])


def init_parameters(arch: str, d: int, c: int, hidden: int, damping: float,
                    seed: int) -> Parameters:
    rng = rng_stream(seed, 0)
    if arch == "linear-softmax":
        shapes = ((d, c),)
    elif arch == "one-hidden":
        shapes = ((d, hidden), (hidden, c))
    else:
        raise ValueError(f"unknown arch {arch!r}")
    mats = [rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b)) for a, b in shapes]
    return Parameters(theta=flatten(mats), shapes=shapes, arch=arch, damping=damping)


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent deterministic stream: one root seed, split per consumer."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def aggregator(graph: Graph) -> sp.csr_matrix:
    """Row-normalized adjacency with self loops, cached on the graph."""
    cached = getattr(graph, "_ahat", None)
    if cached is None:
        cached = normalized_adjacency(graph, mode="row", self_loops=True)
        object.__setattr__(graph, "_ahat", cached)
    return cached


def messages(params: Parameters, graph: Graph):
    """Per-node pre-aggregation output rows M (n, c) and backprop cache."""
    mats = params.matrices()
    if graph.x.shape[1] != mats[0].shape[0]:
        raise ValueError(
            f"graph has {graph.x.shape[1]} features, parameters expect {mats[0].shape[0]}")
    if params.arch == "linear-softmax":
        return graph.x @ mats[0], {}
    pre = graph.x @ mats[0]
    hidden = np.maximum(pre, 0.0)
    return hidden @ mats[1], {"hidden": hidden, "mask": pre > 0.0}


def forward(params: Parameters, graph: Graph) -> Predictions:
    m, _ = messages(params, graph)
    logits = aggregator(graph) @ m
    return Predictions(logits=logits, probs=softmax(logits))


def message_backward(params: Parameters, graph: Graph, u: np.ndarray, cache) -> np.ndarray:
    """Gradient of sum(U * M) w.r.t. theta, for a cotangent U on the rows M."""
    mats = params.matrices()
    if params.arch == "linear-softmax":
        return (graph.x.T @ u).ravel()
    d_w2 = cache["hidden"].T @ u
    d_hidden = (u @ mats[1].T) * cache["mask"]
    d_w1 = graph.x.T @ d_hidden
    return flatten([d_w1, d_w2])


def prob_backward(params: Parameters, graph: Graph, cot_probs: np.ndarray) -> np.ndarray:
    """Gradient of sum(cot_probs * probs) w.r.t. theta."""
    state = evaluate(params, graph)
    gz = state.probs * cot_probs
    gz -= gz.sum(axis=1, keepdims=True) * state.probs
    u = aggregator(graph).T @ gz
    return message_backward(params, graph, u, state.cache)


@dataclass(frozen=True)
class ModelState:
    """Fixed-parameter evaluation cache reused across many queries."""

    params: Parameters
    m: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    cache: dict


def evaluate(params: Parameters, graph: Graph) -> ModelState:
    m, cache = messages(params, graph)
    logits = aggregator(graph) @ m
    return ModelState(params=params, m=m, logits=logits, probs=softmax(logits), cache=cache)


def loss_components(params: Parameters, graph: Graph, nodes) -> np.ndarray:
    """Per-node cross-entropy for training nodes (no damping, no 1/m)."""
    ids = np.asarray(list(nodes) if not isinstance(nodes, np.ndarray) else nodes, dtype=np.int64)
    if ids.size and not graph.train_mask[ids].all():
        bad = ids[~graph.train_mask[ids]][0]
        raise ValueError(f"node {int(bad)} is not a training node")
    logits = forward(params, graph).logits[ids]
    return _ce_rows(logits, graph.y[ids])


def _ce_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


def training_loss(params: Parameters, graph: Graph) -> tuple[float, float]:
    """(mean cross-entropy over the training set, ridge term), reported
    separately; the optimized objective is their sum."""
    ids = graph.train_ids
    if ids.size == 0:
        raise ValueError("training mask is empty")
    ce = float(loss_components(params, graph, ids).mean())
    ridge = 0.5 * params.damping * float(params.theta @ params.theta)
    return ce, ridge


def ce_gradient(params: Parameters, graph: Graph, nodes) -> np.ndarray:
    """Sum over `nodes` of per-node cross-entropy gradients w.r.t. theta."""
    ids = np.asarray(list(nodes) if not isinstance(nodes, np.ndarray) else nodes, dtype=np.int64)
    state = evaluate(params, graph)
    gz = state.probs[ids].copy()
    gz[np.arange(len(ids)), graph.y[ids]] -= 1.0
    ahat = aggregator(graph)
    u = ahat[ids].T @ gz
    return message_backward(params, graph, u, state.cache)


def training_gradient(params: Parameters, graph: Graph) -> np.ndarray:
    ids = graph.train_ids
    return ce_gradient(params, graph, ids) / len(ids) + params.damping * params.theta


def hvp_operator(params: Parameters, graph: Graph):
    """Damped curvature-vector product as a closure over cached state.

    Exact Hessian of the training objective for linear-softmax; Gauss-Newton
    plus damping for one-hidden.
    """
    ids = graph.train_ids
    m = len(ids)
    state = evaluate(params, graph)
    p_tr = state.probs[ids]
    ahat_tr = aggregator(graph)[ids]
    ahat_tr_t = ahat_tr.T.tocsr()
    lam = params.damping
    x = graph.x

    if params.arch == "linear-softmax":
        f_tr = ahat_tr @ x  # aggregated features of training rows

        def apply(vec: np.ndarray) -> np.ndarray:
            v = vec.reshape(params.shapes[0])
            a = f_tr @ v
            s = p_tr * a
            s -= s.sum(axis=1, keepdims=True) * p_tr
            return (f_tr.T @ s / m).ravel() + lam * vec

        return apply

    hidden, mask = state.cache["hidden"], state.cache["mask"]
    w2 = params.matrices()[1]
    sh1, sh2 = params.shapes
    n1 = sh1[0] * sh1[1]

    def apply(vec: np.ndarray) -> np.ndarray:
        v1 = vec[:n1].reshape(sh1)
        v2 = vec[n1:].reshape(sh2)
        d_hidden = (x @ v1) * mask
        dz = ahat_tr @ (d_hidden @ w2 + hidden @ v2)
        s = p_tr * dz
        s -= s.sum(axis=1, keepdims=True) * p_tr
        s /= m
        u = ahat_tr_t @ s
        g_w2 = hidden.T @ u
        g_hidden = (u @ w2.T) * mask
        g_w1 = x.T @ g_hidden
        return flatten([g_w1, g_w2]) + lam * vec

    return apply


def hvp(params: Parameters, graph: Graph, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (params.size,):
        raise ValueError(f"vector has shape {vec.shape}, expected ({params.size},)")
    return hvp_operator(params, graph)(vec)


def hessian_matrix(params: Parameters, graph: Graph) -> np.ndarray:
    """Dense damped curvature, assembled column by column (desk scale)."""
    apply = hvp_operator(params, graph)
    t = params.size
    h = np.empty((t, t))
    eye = np.eye(t)
    for k in range(t):
        h[:, k] = apply(eye[k])
    return 0.5 * (h + h.T)


@dataclass(frozen=True)
class HessianFactor:
    """Cholesky factor of the dense damped curvature; shared across the
    per-node solves of an audit as the conjugate-gradient preconditioner."""

    cho: tuple

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.cho, b)


def hessian_factor(params: Parameters, graph: Graph) -> HessianFactor:
    return HessianFactor(cho=sla.cho_factor(hessian_matrix(params, graph)))


def inverse_hvp(params: Parameters, graph: Graph, b: np.ndarray, solver: str = "cg",
                tol: float = 1e-6, maxiter: int = 2000, lissa_iters: int = 1000,
                lissa_scale: float = 0.0, x0: np.ndarray | None = None,
                factor: HessianFactor | None = None,
                operator=None) -> np.ndarray:
    """Solve (damped curvature) @ x = b to a relative residual <= tol.

    "cg" runs (optionally preconditioned, optionally warm-started) conjugate
    gradients; "lissa" runs the truncated Neumann series with `lissa_iters`
    terms. Both verify the residual with a final curvature product and raise
    SolverError when it exceeds tol.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (params.size,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({params.size},)")
    apply = operator if operator is not None else hvp_operator(params, graph)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b)
    if solver == "cg":
        x = _cg(apply, b, tol=tol, maxiter=maxiter, x0=x0,
                precondition=factor.solve if factor is not None else None)
    elif solver == "lissa":
        x = _lissa(apply, b, iters=lissa_iters, scale=lissa_scale)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    residual = np.linalg.norm(apply(x) - b) / b_norm
    if residual > tol:
        raise SolverError(f"{solver} did not converge within its budget", residual)
    return x


def _cg(apply, b, tol, maxiter, x0=None, precondition=None):
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64).copy()
    r = b - apply(x)
    z = precondition(r) if precondition else r
    p = z.copy()
    rz = r @ z
    b_norm = np.linalg.norm(b)
    for _ in range(maxiter):
        if np.linalg.norm(r) <= 0.5 * tol * b_norm:
            break
        ap = apply(p)
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = precondition(r) if precondition else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _lissa(apply, b, iters, scale):
    if scale <= 0.0:
        scale = 1.05 * _operator_norm(apply, b.shape[0])
    term = b.copy()
    total = b.copy()
    for _ in range(int(iters)):
        term = term - apply(term) / scale
        total += term
    return total / scale


def _operator_norm(apply, t: int, iters: int = 60) -> float:
    v = np.full(t, 1.0 / np.sqrt(t))
    lam = 1.0
    for _ in range(iters):
        w = apply(v)
        lam = np.linalg.norm(w)
        if lam == 0.0:
            return 1.0
        v = w / lam
    return lam


def train(graph: Graph, config, seed: int) -> Parameters:
    """Deterministic full-batch training.

    Runs `config.epochs` optimizer steps (adam by default, plain gradient
    descent via config.optimizer="gd"), then, for the convex linear-softmax
    architecture with dropout off, polishes with damped Newton steps until
    the gradient norm falls below config.refine_tol. Dropout (the
    paper-faithful mode) is applied per epoch from its own seeded stream.
    """
    ids = graph.train_ids
    if ids.size == 0:
        raise ValueError("training mask is empty")
    c = graph.num_classes
    params = init_parameters(config.arch, graph.num_features, c, config.hidden_dim,
                             config.damping, seed)
    theta = params.theta.copy()
    shapes = params.shapes
    lam = config.damping
    m = len(ids)
    y_tr = graph.y[ids]
    ahat_tr = aggregator(graph)[ids]
    ahat_tr_t = ahat_tr.T.tocsr()
    x = graph.x
    drop_rng = rng_stream(seed, 1) if config.dropout_mode == "paper" else None

    def loss_grad(flat):
        mats, k = [], 0
        for a, b in shapes:
            mats.append(flat[k:k + a * b].reshape(a, b))
            k += a * b
        x_eff = x
        if drop_rng is not None:
            keep = drop_rng.random(x.shape) >= config.dropout
            x_eff = x * keep / (1.0 - config.dropout)
        if config.arch == "linear-softmax":
            msg = x_eff @ mats[0]
            cache = None
        else:
            pre = x_eff @ mats[0]
            hid = np.maximum(pre, 0.0)
            if drop_rng is not None:
                keep_h = drop_rng.random(hid.shape) >= config.dropout
                hid = hid * keep_h / (1.0 - config.dropout)
            cache = (hid, pre > 0.0)
            msg = hid @ mats[1]
        z = ahat_tr @ msg
        p = softmax(z)
        loss = float(_ce_rows(z, y_tr).mean()) + 0.5 * lam * float(flat @ flat)
        gz = p.copy()
        gz[np.arange(m), y_tr] -= 1.0
        gz /= m
        u = ahat_tr_t @ gz
        if config.arch == "linear-softmax":
            grad = (x_eff.T @ u).ravel()
        else:
            hid, mask = cache
            g_w2 = hid.T @ u
            g_hid = (u @ mats[1].T) * mask
            grad = flatten([x_eff.T @ g_hid, g_w2])
        return loss, grad + lam * flat

    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    b1, b2 = ADAM_BETAS
    for epoch in range(config.epochs):
        loss, grad = loss_grad(theta)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(epoch)
        if config.optimizer == "adam":
            adam_m = b1 * adam_m + (1 - b1) * grad
            adam_v = b2 * adam_v + (1 - b2) * grad * grad
            m_hat = adam_m / (1 - b1 ** (epoch + 1))
            v_hat = adam_v / (1 - b2 ** (epoch + 1))
            theta = theta - config.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:
            theta = theta - config.lr * grad

    result = Parameters(theta=theta, shapes=shapes, arch=config.arch, damping=lam)
    if (config.refine_newton and config.arch == "linear-softmax"
            and config.dropout_mode == "off"):
        result = _newton_refine(result, graph, config.refine_tol)
    return result


def _newton_refine(params: Parameters, graph: Graph, tol: float) -> Parameters:
    theta = params.theta.copy()
    for _ in range(NEWTON_MAX_STEPS):
        current = Parameters(theta=theta, shapes=params.shapes, arch=params.arch,
                             damping=params.damping)
        grad = training_gradient(current, graph)
        if np.linalg.norm(grad) <= tol:
            return current
        step = sla.cho_solve(sla.cho_factor(hessian_matrix(current, graph)), grad)
        ce, ridge = training_loss(current, graph)
        base = ce + ridge
        scale = 1.0
        for _ in range(30):
            cand = Parameters(theta=theta - scale * step, shapes=params.shapes,
                              arch=params.arch, damping=params.damping)
            ce2, ridge2 = training_loss(cand, graph)
            if ce2 + ridge2 <= base + 1e-12:
                break
            scale *= 0.5
        theta = theta - scale * step
    return Parameters(theta=theta, shapes=params.shapes, arch=params.arch,
                      damping=params.damping)


def save_parameters(params: Parameters, path) -> None:
    meta = {
        "version": PARAMS_FORMAT_VERSION,
        "arch": params.arch,
        "shapes": [list(s) for s in params.shapes],
        "damping": params.damping,
    }
    with open(path, "wb") as fh:
        np.savez(fh, theta=params.theta, meta=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_parameters(path) -> Parameters:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported parameter file version {meta.get('version')}")
        return Parameters(
            theta=data["theta"].astype(np.float64),
            shapes=tuple(tuple(s) for s in meta["shapes"]),
            arch=meta["arch"],
            damping=float(meta["damping"]),
        )
