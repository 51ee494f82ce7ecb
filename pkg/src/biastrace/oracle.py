"""Ground truth via retraining, and the evaluation protocols built on it:
estimation fidelity over disjoint node sets, wall-clock speedup versus
retraining, consistency between the transport disparity and hard-label
gaps, and the bound on how far a deletion can move nearby test-node
representations under plain row-normalized propagation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import debias, metrics, model as mdl
from .graphs import Graph, computation_graph, path_stats, remove_nodes
from .influence import estimate_influences
from .model import train


def pearson(xs, ys) -> float:
    """Sample Pearson correlation; insists on length >= 2 and nonzero
    variance on both sides."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equally sized vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("pearson is undefined for zero-variance input")
    return float((dx @ dy) / np.sqrt(vx * vy))


def retrained_disparity(graph: Graph, config, seed: int, kind: str,
                        lam: float = 0.5) -> float:
    params = train(graph, config, seed)
    preds = mdl.forward(params, graph)
    return metrics.disparity(preds, graph, kind, lam=lam,
                             reg=config.sinkhorn_reg, iters=config.sinkhorn_iters,
                             tol=config.sinkhorn_tol)


def actual_disparity_delta(graph: Graph, nodes, config, seed: int,
                           kind: str | None = None, lam: float | None = None,
                           baseline: float | None = None) -> float:
    """Ground-truth disparity change from deleting `nodes` (training nodes
    only): retrain from the same seed on the pruned graph and difference the
    test-set disparity. The test mask survives deletion untouched."""
    kind = kind or config.metric
    lam = config.mix_lambda if lam is None else lam
    chosen = [int(v) for v in nodes]
    for v in chosen:
        if not graph.train_mask[v]:
            raise ValueError(f"node {v} is not a training node")
    if baseline is None:
        baseline = retrained_disparity(graph, config, seed, kind, lam)
    if not chosen:
        return 0.0
    pruned = remove_nodes(graph, chosen)
    return retrained_disparity(pruned, config, seed, kind, lam) - baseline


def disjoint_node_sets(records, graph: Graph, max_size: int, hops: int = 1):
    """Greedy node sets with pairwise disjoint receptive-field training
    sets, one per size threshold 1..max_size, built separately from the
    most negative and most positive estimated disparity changes (ties break
    by node id; flagged records are skipped)."""
    usable = [r for r in records if r.ok and np.isfinite(r.delta_estimate)]
    train_sets = {r.node: computation_graph(graph, r.node, hops).member_training_nodes
                  for r in usable}

    def chain(order):
        picked = []
        used = set()
        for rec in order:
            if len(picked) == max_size:
                break
            members = train_sets[rec.node]
            if used & members:
                continue
            picked.append(rec.node)
            used |= members
        return picked

    harmful = chain(sorted(usable, key=lambda r: (r.delta_estimate, r.node)))
    helpful = chain(sorted(usable, key=lambda r: (-r.delta_estimate, r.node)))
    sets = []
    for size in range(1, max_size + 1):
        if size <= len(harmful):
            sets.append(tuple(harmful[:size]))
        if size <= len(helpful):
            sets.append(tuple(helpful[:size]))
    return sets


@dataclass(frozen=True)
class FidelityReport:
    """Estimated vs retrained disparity changes over disjoint node sets."""

    kind: str
    points: tuple          # ((estimated, actual), ...)
    pearson: float
    set_sizes: tuple

    def to_table(self) -> str:
        lines = ["set_size\testimated\tactual"]
        for size, (est, act) in zip(self.set_sizes, self.points):
            lines.append(f"{size}\t{est!r}\t{act!r}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> list[str]:
        return [f"kind = {self.kind}", f"pearson = {self.pearson!r}",
                f"points = {len(self.points)}"]


def fidelity_experiment(graph: Graph, config, seed: int,
                        kind: str | None = None) -> FidelityReport:
    """Estimate influences once, then retrain per disjoint node set and
    correlate estimated against actual disparity changes."""
    kind = kind or config.metric
    params = train(graph, config, seed)
    records = estimate_influences(params, graph, config, kind=kind)
    m = len(records)
    max_size = config.fidelity_max_size or min(20, max(1, m // 5))
    sets = disjoint_node_sets(records, graph, max_size, hops=config.hops)
    by_node = {r.node: r for r in records}
    baseline = metrics.disparity(mdl.forward(params, graph), graph, kind,
                                 lam=config.mix_lambda, reg=config.sinkhorn_reg,
                                 iters=config.sinkhorn_iters, tol=config.sinkhorn_tol)
    points = []
    sizes = []
    for node_set in sets:
        est = float(sum(by_node[v].delta_estimate for v in node_set))
        act = actual_disparity_delta(graph, node_set, config, seed, kind=kind,
                                     baseline=baseline)
        points.append((est, act))
        sizes.append(len(node_set))
    if len(points) < 2:
        raise ValueError("too few node sets for a fidelity correlation")
    corr = pearson([p[0] for p in points], [p[1] for p in points])
    return FidelityReport(kind=kind, points=tuple(points), pearson=corr,
                          set_sizes=tuple(sizes))


@dataclass(frozen=True)
class SpeedupReport:
    """Average per-node wall times: retraining vs (amortized) estimation."""

    t_retrain_avg: float
    t_estimate_avg: float
    factor: float
    retrain_times: tuple   # (node, seconds) per sampled node
    estimate_total: float
    estimated_nodes: int

    def to_table(self) -> str:
        lines = ["node_id\tretrain_seconds"]
        for node, sec in self.retrain_times:
            lines.append(f"{node}\t{sec!r}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> list[str]:
        return [f"t_retrain_avg = {self.t_retrain_avg!r}",
                f"t_estimate_avg = {self.t_estimate_avg!r}",
                f"factor = {self.factor!r}",
                f"estimated_nodes = {self.estimated_nodes}"]


def speedup_experiment(graph: Graph, config, seed: int | None = None) -> SpeedupReport:
    """Compare the per-node cost of the retraining route (delete, retrain,
    re-evaluate the disparity) against the estimation route, whose one-time
    setup is amortized over all training nodes."""
    seed = config.seed if seed is None else seed
    params = train(graph, config, seed)
    baseline = retrained_disparity(graph, config, seed, config.metric, config.mix_lambda)

    train_ids = graph.train_ids
    sample = train_ids[:min(len(train_ids), max(1, config.speedup_sample))]
    retrain_times = []
    for node in sample:
        t0 = time.perf_counter()
        actual_disparity_delta(graph, [int(node)], config, seed, baseline=baseline)
        retrain_times.append((int(node), time.perf_counter() - t0))

    t0 = time.perf_counter()
    records = estimate_influences(params, graph, config)
    estimate_total = time.perf_counter() - t0

    t_retrain = float(np.mean([t for _, t in retrain_times]))
    t_estimate = estimate_total / len(records)
    return SpeedupReport(
        t_retrain_avg=t_retrain, t_estimate_avg=t_estimate,
        factor=t_retrain / t_estimate, retrain_times=tuple(retrain_times),
        estimate_total=estimate_total, estimated_nodes=len(records))


@dataclass(frozen=True)
class ConsistencyReport:
    """Transport disparity vs hard-label gap along a deletion-budget sweep."""

    rows: tuple            # (metric, budget, disparity, gap)
    corr_sp: float
    corr_eo: float

    def to_table(self) -> str:
        lines = ["metric\tbudget\tdisparity\tlabel_gap"]
        for metric, budget, disp, gap in self.rows:
            lines.append(f"{metric}\t{budget!r}\t{disp!r}\t{gap!r}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> list[str]:
        return [f"corr_sp = {self.corr_sp!r}", f"corr_eo = {self.corr_eo!r}",
                f"rows = {len(self.rows)}"]


def consistency_experiment(graph: Graph, config, seed: int | None = None,
                           budgets=None) -> ConsistencyReport:
    """For each deletion budget: select estimated-harmful nodes, retrain,
    and record (disparity, hard-label gap) pairs for both parity notions."""
    seed = config.seed if seed is None else seed
    budgets = tuple(config.budgets if budgets is None else budgets)
    params = train(graph, config, seed)
    rows = []
    series = {"sp": ([], []), "eo": ([], [])}
    for metric in ("sp", "eo"):
        records = estimate_influences(params, graph, config, kind=metric)
        for budget in budgets:
            chosen = debias.select_harmful(records, graph, budget, hops=config.hops) \
                if budget > 0 else ()
            pruned = remove_nodes(graph, list(chosen)) if chosen else graph
            re_params = train(pruned, config, seed)
            preds = mdl.forward(re_params, pruned)
            disp = metrics.disparity(preds, pruned, metric, reg=config.sinkhorn_reg,
                                     iters=config.sinkhorn_iters, tol=config.sinkhorn_tol)
            sp_gap, eo_gap, _ = metrics.label_metrics(preds, pruned)
            gap = sp_gap if metric == "sp" else eo_gap
            rows.append((metric, float(budget), disp, gap))
            series[metric][0].append(disp)
            series[metric][1].append(gap)
    return ConsistencyReport(
        rows=tuple(rows),
        corr_sp=pearson(*series["sp"]),
        corr_eo=pearson(*series["eo"]),
    )


@dataclass(frozen=True)
class BoundRow:
    test_node: int
    measured: float
    bound: float
    paths: int
    distance: int
    min_geo_mean: float

    @property
    def violated(self) -> bool:
        return self.measured > self.bound


@dataclass(frozen=True)
class BoundReport:
    """Representation-shift check for one deleted node: every test node in
    its receptive field, measured relative shift vs the path-count bound."""

    center: int
    hops: int
    rows: tuple

    @property
    def violations(self) -> int:
        return sum(1 for r in self.rows if r.violated)

    def to_table(self) -> str:
        lines = ["test_node\tmeasured\tbound\tpaths\tdistance\tmin_geo_mean"]
        for r in self.rows:
            lines.append(f"{r.test_node}\t{r.measured!r}\t{r.bound!r}\t{r.paths}"
                         f"\t{r.distance}\t{r.min_geo_mean!r}")
        return "\n".join(lines) + "\n"


def representation_shift_bounds(graph: Graph, node: int, hops: int = 2,
                                self_loops: bool = True) -> BoundReport:
    """Check, for every test node within `hops` of `node`, that deleting
    `node` moves its propagated representation by at most
    paths / min_geo_mean_degree ** distance.

    Propagation is plain mean aggregation iterated `hops` times (identity
    weights and activation) on inputs projected to the unit sphere, which
    equalizes representation norms as the bound requires.
    """
    node = int(node)
    x = graph.x
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x_unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    z = _propagate(graph, x_unit, hops, self_loops)
    pruned = remove_nodes(graph, [node])
    z_cut_small = _propagate(pruned, x_unit[pruned.origin_ids], hops, self_loops)
    new_of_old = -np.ones(graph.n, dtype=np.int64)
    new_of_old[pruned.origin_ids] = np.arange(pruned.n)

    members = computation_graph(graph, node, hops).members
    rows = []
    for j in sorted(members):
        if j == node or not graph.test_mask[j]:
            continue
        stats = path_stats(graph, j, node, hops, self_loops=self_loops)
        if stats.path_count == 0:
            continue
        zj = z[j]
        zj_cut = z_cut_small[new_of_old[j]]
        denom = np.linalg.norm(zj)
        measured = float(np.linalg.norm(zj_cut - zj) / denom) if denom > 0 else 0.0
        bound = stats.path_count / stats.min_geo_mean ** stats.shortest_distance
        rows.append(BoundRow(test_node=j, measured=measured, bound=float(bound),
                             paths=stats.path_count, distance=stats.shortest_distance,
                             min_geo_mean=float(stats.min_geo_mean)))
    return BoundReport(center=node, hops=hops, rows=tuple(rows))


def _propagate(graph: Graph, feats: np.ndarray, hops: int, self_loops: bool) -> np.ndarray:
    from .graphs import normalized_adjacency

    ahat = normalized_adjacency(graph, mode="row", self_loops=self_loops)
    z = feats
    for _ in range(hops):
        z = ahat @ z
    return z
