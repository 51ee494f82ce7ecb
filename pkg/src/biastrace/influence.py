"""Per-training-node influence on model bias, without retraining.

For each training node the engine solves one damped-curvature system whose
right-hand side combines the node's own loss gradient with the shift it
induces in neighboring training losses (graph data is not i.i.d.: deleting
a node changes the aggregation rows of its neighbors). The influence score
is the inner product of that solution with the disparity gradient; with the
deletion down-weighting fixed at 1/m, the estimated disparity change on
deletion is exactly -score/m.

Sign convention: score > 0 means deletion is estimated to reduce the
disparity, i.e. the node is harmful to fairness; score < 0 marks a helpful
node.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import metrics, model as mdl
from .graphs import Graph, computation_graph

SOLVER_FAILED = "solver_failed"
NONSTATIONARY = "nonstationary"


@dataclass(frozen=True)
class InfluenceRecord:
    """One training node's estimated effect on the test-set disparity."""

    node: int
    score: float                 # positive = harmful to fairness
    delta_estimate: float        # estimated disparity change on deletion, -score/m
    self_grad_norm: float
    coupling_grad_norm: float
    solver_residual: float
    flags: tuple = ()

    @property
    def ok(self) -> bool:
        return SOLVER_FAILED not in self.flags


def neighbor_loss_delta(params: mdl.Parameters, graph: Graph, node: int,
                        state: mdl.ModelState | None = None):
    """Loss shift of neighboring training nodes caused by `node`.

    Returns (value, gradient): the summed difference between each neighbor
    training node's loss on the intact graph and on the graph with `node`
    deleted (only the aggregation rows touching `node` change), and the
    analytic parameter gradient of the same expression.
    """
    node = int(node)
    state = state or mdl.evaluate(params, graph)
    ahat = mdl.aggregator(graph)
    others = sorted(computation_graph(graph, node, 1).member_training_nodes - {node})

    u = np.zeros_like(state.m)
    value = 0.0
    for j in others:
        row = ahat.getrow(j)
        cols, vals = row.indices, row.data
        z_full = state.logits[j]
        p_full = state.probs[j]
        gz_full = p_full.copy()
        gz_full[graph.y[j]] -= 1.0
        u[cols] += np.outer(vals, gz_full)
        value += _ce_row(z_full, graph.y[j])

        keep = cols != node
        w = 1.0 / keep.sum()  # self loop survives, so the row never empties
        z_cut = w * state.m[cols[keep]].sum(axis=0)
        p_cut = mdl.softmax(z_cut)
        gz_cut = p_cut.copy()
        gz_cut[graph.y[j]] -= 1.0
        u[cols[keep]] -= w * gz_cut
        value -= _ce_row(z_cut, graph.y[j])

    grad = mdl.message_backward(params, graph, u, state.cache)
    return float(value), grad


def _ce_row(logits: np.ndarray, label: int) -> float:
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def _self_gradient(params, graph, node, state):
    gz = state.probs[node].copy()
    gz[graph.y[node]] -= 1.0
    row = mdl.aggregator(graph).getrow(node)
    u = np.zeros_like(state.m)
    u[row.indices] += np.outer(row.data, gz)
    return mdl.message_backward(params, graph, u, state.cache)


def parameter_response(params: mdl.Parameters, graph: Graph, node: int,
                       config, state: mdl.ModelState | None = None,
                       factor=None, operator=None, x0=None,
                       include_coupling: bool | None = None):
    """Direction the trained parameters move per unit of down-weighting of
    `node`: the damped-curvature inverse applied to the combined gradient.

    Returns (solution, self_grad, coupling_grad).
    """
    node = int(node)
    if not graph.train_mask[node]:
        raise ValueError(f"node {node} is not a training node")
    state = state or mdl.evaluate(params, graph)
    include = config.include_coupling if include_coupling is None else include_coupling
    g_self = _self_gradient(params, graph, node, state)
    if include:
        _, g_coupling = neighbor_loss_delta(params, graph, node, state)
    else:
        g_coupling = np.zeros_like(g_self)
    rhs = g_self + g_coupling
    x = mdl.inverse_hvp(params, graph, rhs, solver=config.solver, tol=config.solver_tol,
                        maxiter=config.solver_maxiter, lissa_iters=config.lissa_iters,
                        lissa_scale=config.lissa_scale, x0=x0, factor=factor,
                        operator=operator)
    return x, g_self, g_coupling


def bias_influence(params: mdl.Parameters, graph: Graph, node: int, config,
                   kind: str | None = None, lam: float | None = None) -> float:
    """Influence score of one training node on the test-set disparity."""
    kind = kind or config.metric
    lam = config.mix_lambda if lam is None else lam
    dgamma = metrics.disparity_gradient(
        params, graph, kind=kind, lam=lam, method=config.grad_method,
        reg=config.sinkhorn_reg, iters=config.sinkhorn_iters, tol=config.sinkhorn_tol)
    x, _, _ = parameter_response(params, graph, node, config)
    return float(-(dgamma @ x))


def _bfs_order(graph: Graph) -> list[int]:
    """All nodes in BFS order (components visited by ascending seed id), so
    consecutive training nodes share neighborhoods and warm starts help."""
    from collections import deque

    nbrs = graph.neighbor_lists()
    seen = np.zeros(graph.n, dtype=bool)
    order = []
    for root in range(graph.n):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            order.append(u)
            for w in nbrs[u]:
                w = int(w)
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return order


def estimate_influences(params: mdl.Parameters, graph: Graph, config,
                        kind: str | None = None, lam: float | None = None):
    """Influence records for every training node, ordered by node id.

    The disparity gradient and the curvature factorization are computed
    once; per-node solves then run (optionally on a thread pool over
    contiguous chunks of a BFS ordering, warm-starting each solve from its
    predecessor within the chunk). Failed solves are flagged and excluded
    from downstream selection, never zeroed.
    """
    kind = kind or config.metric
    lam = config.mix_lambda if lam is None else lam
    train_ids = graph.train_ids
    m = len(train_ids)
    if m == 0:
        raise ValueError("training mask is empty")

    base_flags = ()
    grad_norm = float(np.linalg.norm(mdl.training_gradient(params, graph)))
    if grad_norm > config.stationarity_tol:
        base_flags = (NONSTATIONARY,)

    state = mdl.evaluate(params, graph)
    dgamma = metrics.disparity_gradient(
        params, graph, kind=kind, lam=lam, method=config.grad_method,
        reg=config.sinkhorn_reg, iters=config.sinkhorn_iters, tol=config.sinkhorn_tol)
    operator = mdl.hvp_operator(params, graph)
    factor = mdl.hessian_factor(params, graph) if config.solver == "cg" else None
    lissa_scale = config.lissa_scale
    if config.solver == "lissa" and lissa_scale <= 0.0:
        lissa_scale = 1.05 * mdl._operator_norm(operator, params.size)

    in_train = set(int(v) for v in train_ids)
    ordered = [v for v in _bfs_order(graph) if v in in_train]

    def run_chunk(chunk):
        out = []
        warm = None
        for node in chunk:
            g_self = _self_gradient(params, graph, node, state)
            if config.include_coupling:
                _, g_coupling = neighbor_loss_delta(params, graph, node, state)
            else:
                g_coupling = np.zeros_like(g_self)
            rhs = g_self + g_coupling
            flags = base_flags
            try:
                x = mdl.inverse_hvp(params, graph, rhs, solver=config.solver,
                                    tol=config.solver_tol, maxiter=config.solver_maxiter,
                                    lissa_iters=config.lissa_iters, lissa_scale=lissa_scale,
                                    x0=warm, factor=factor, operator=operator)
                warm = x
                rhs_norm = np.linalg.norm(rhs)
                residual = (float(np.linalg.norm(operator(x) - rhs) / rhs_norm)
                            if rhs_norm > 0 else 0.0)
                score = float(-(dgamma @ x))
                delta = -score / m
            except mdl.SolverError as exc:
                flags = flags + (SOLVER_FAILED,)
                score = float("nan")
                delta = float("nan")
                residual = exc.residual
            out.append(InfluenceRecord(
                node=int(node), score=score, delta_estimate=delta,
                self_grad_norm=float(np.linalg.norm(g_self)),
                coupling_grad_norm=float(np.linalg.norm(g_coupling)),
                solver_residual=residual, flags=flags))
        return out

    workers = max(1, int(config.workers))
    if workers == 1 or m < 2 * workers:
        records = run_chunk(ordered)
    else:
        chunks = [list(c) for c in np.array_split(ordered, workers) if len(c)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = [rec for part in pool.map(run_chunk, chunks) for rec in part]
    records.sort(key=lambda r: r.node)
    return records


def combined_influence(records, nodes, graph: Graph, hops: int = 1) -> float:
    """Sum of influence scores over a node set whose receptive fields share
    no training nodes (validated; additivity holds exactly then)."""
    by_node = {r.node: r for r in records}
    chosen = [int(v) for v in nodes]
    for v in chosen:
        if v not in by_node:
            raise ValueError(f"no influence record for node {v}")
        if not by_node[v].ok:
            raise ValueError(f"node {v} has a failed solve; excluded from set scoring")
    train_sets = {v: computation_graph(graph, v, hops).member_training_nodes for v in chosen}
    for i in range(len(chosen)):
        for j in range(i + 1, len(chosen)):
            a, b = chosen[i], chosen[j]
            if train_sets[a] & train_sets[b]:
                raise ValueError(
                    f"nodes {a} and {b} have overlapping computation-graph training sets")
    return float(sum(by_node[v].score for v in chosen))


TABLE_HEADER = "node_id\tscore\tdelta_estimate\tself_grad_norm\tcoupling_grad_norm\tsolver_residual\tflags"


def records_to_table(records) -> str:
    lines = [TABLE_HEADER]
    for r in records:
        flags = ",".join(r.flags)
        lines.append(f"{r.node}\t{r.score!r}\t{r.delta_estimate!r}\t{r.self_grad_norm!r}"
                     f"\t{r.coupling_grad_norm!r}\t{r.solver_residual!r}\t{flags}")
    return "\n".join(lines) + "\n"


def records_from_table(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != TABLE_HEADER:
        raise ValueError("not an influence table")
    out = []
    for ln in lines[1:]:
        node, score, delta, g1, g2, res, flags = ln.split("\t")
        out.append(InfluenceRecord(
            node=int(node), score=float(score), delta_estimate=float(delta),
            self_grad_norm=float(g1), coupling_grad_norm=float(g2),
            solver_residual=float(res),
            flags=tuple(f for f in flags.split(",") if f)))
    return out
