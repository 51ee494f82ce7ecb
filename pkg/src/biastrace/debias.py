"""Budgeted debiasing by deleting the training nodes estimated most
harmful to fairness, then retraining and comparing bias reports.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import metrics, model as mdl
from .graphs import Graph, computation_graph, remove_nodes
from .influence import estimate_influences


def select_harmful(records, graph: Graph, budget_fraction: float, hops: int = 1):
    """Greedy harmful-node selection under a deletion budget.

    Walks records by descending influence score (ties by node id), keeps a
    node only if its receptive-field training set is disjoint from every
    node already kept, and stops at ceil(budget_fraction * m) nodes or when
    no positive-score node remains. Returns a tuple of node ids.
    """
    if not 0.0 < budget_fraction <= 1.0:
        raise ValueError("budget_fraction must lie in (0, 1]")
    m = len(records)
    budget = math.ceil(budget_fraction * m)
    usable = [r for r in records if r.ok and np.isfinite(r.score) and r.score > 0.0]
    usable.sort(key=lambda r: (-r.score, r.node))
    picked = []
    used = set()
    for rec in usable:
        if len(picked) == budget:
            break
        members = computation_graph(graph, rec.node, hops).member_training_nodes
        if used & members:
            continue
        picked.append(rec.node)
        used |= members
    if not picked:
        warnings.warn("no training node has a positive estimated effect on the "
                      "disparity; nothing to delete", stacklevel=2)
    return tuple(picked)


@dataclass(frozen=True)
class DebiasReport:
    """Before/after bias summary for one budgeted deletion run."""

    budget_fraction: float
    mix_lambda: float
    deleted_nodes: tuple
    before: metrics.BiasReport
    after: metrics.BiasReport

    @property
    def accuracy_delta(self) -> float:
        return self.after.accuracy - self.before.accuracy

    def to_kv(self) -> list[str]:
        lines = [f"budget_fraction = {self.budget_fraction!r}",
                 f"mix_lambda = {self.mix_lambda!r}",
                 f"deleted = {','.join(str(v) for v in self.deleted_nodes)}",
                 f"accuracy_delta = {self.accuracy_delta!r}"]
        lines += [f"before.{ln}" for ln in self.before.to_kv()]
        lines += [f"after.{ln}" for ln in self.after.to_kv()]
        return lines


def debias_run(graph: Graph, config, budget_fraction: float | None = None,
               lam: float | None = None, seed: int | None = None) -> DebiasReport:
    """Estimate influences on the mixed disparity once, delete the selected
    harmful nodes, retrain from the same seed, and report bias before and
    after. Warns (does not fail) when accuracy drops beyond the guard."""
    seed = config.seed if seed is None else seed
    lam = config.mix_lambda if lam is None else lam
    budget = config.budget_fraction if budget_fraction is None else budget_fraction
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget_fraction must lie in [0, 1]")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")

    params = mdl.train(graph, config, seed)
    before = metrics.bias_report(mdl.forward(params, graph), graph,
                                 reg=config.sinkhorn_reg, iters=config.sinkhorn_iters,
                                 tol=config.sinkhorn_tol)
    if budget > 0.0:
        records = estimate_influences(params, graph, config, kind="mix", lam=lam)
        chosen = select_harmful(records, graph, budget, hops=config.hops)
    else:
        chosen = ()
    pruned = remove_nodes(graph, list(chosen)) if chosen else graph
    re_params = mdl.train(pruned, config, seed)
    after = metrics.bias_report(mdl.forward(re_params, pruned), pruned,
                                reg=config.sinkhorn_reg, iters=config.sinkhorn_iters,
                                tol=config.sinkhorn_tol)
    report = DebiasReport(budget_fraction=float(budget), mix_lambda=float(lam),
                          deleted_nodes=chosen, before=before, after=after)
    if report.accuracy_delta < -config.accuracy_guard:
        warnings.warn(
            f"accuracy dropped {-report.accuracy_delta:.3f} "
            f"(guard {config.accuracy_guard:.3f}) after deleting {len(chosen)} nodes",
            stacklevel=2)
    return report
