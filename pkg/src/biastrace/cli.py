"""Command-line pipeline: gen, train, audit, fidelity, speedup,
consistency, prop1, debias.

Every command writes its artifacts plus the effective configuration
(config.effective.cfg) and a manifest (command, config hash, seed, library
versions, input/output digests) into the output directory, so any
deterministic artifact can be regenerated bit-identically by re-running
the command with the persisted config. Wall-clock measurements (the
speedup command) are recorded as measured outputs and exempt from the
bit-identity contract.

All randomness flows from the single root seed in the config; consumers
draw from deterministic substreams of it.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, debias as debias_mod, metrics, model as mdl, oracle
from .config import AuditConfig, apply_overrides, config_hash, parse_config, serialize_config
from .datagen import synth_biased_graph, synth_config_from
from .graphs import SplitPolicy, load_graph_dir, remove_nodes, save_graph, with_split
from .influence import estimate_influences, records_to_table
from .model import rng_stream

COMMANDS = ("gen", "train", "audit", "fidelity", "speedup", "consistency",
            "prop1", "debias")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_RUNTIME = 4


class MissingInputError(FileNotFoundError):
    pass


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or f"out_{args.command}")
    try:
        run(args.command, cfg, out)
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ValueError, RuntimeError) as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biastrace",
        description="Attribute a graph classifier's demographic bias to its "
                    "training nodes, and debias by deletion.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="root seed (overrides config)")
    parser.add_argument("--out", help="output directory (default: out_<command>)")
    parser.add_argument("--workers", type=int, help="influence worker count")
    return parser


def _effective_config(args) -> AuditConfig:
    cfg = AuditConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInputError(f"config file {path} does not exist")
        cfg = parse_config(path.read_text(), base=cfg)
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg.validate()


def run(command: str, cfg: AuditConfig, out: Path):
    """Run one command; returns {artifact name: path}. Raises on failure."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = {
        "gen": _cmd_gen, "train": _cmd_train, "audit": _cmd_audit,
        "fidelity": _cmd_fidelity, "speedup": _cmd_speedup,
        "consistency": _cmd_consistency, "prop1": _cmd_prop1,
        "debias": _cmd_debias,
    }[command]
    artifacts, measured, inputs = handler(cfg, out)
    cfg_path = out / "config.effective.cfg"
    cfg_path.write_text(serialize_config(cfg))
    artifacts["config.effective.cfg"] = cfg_path
    _write_manifest(out, command, cfg, artifacts, measured, inputs)
    return artifacts


def _write_manifest(out: Path, command: str, cfg: AuditConfig, artifacts,
                    measured, inputs) -> None:
    lines = [
        f"command = {command}",
        f"config_hash = {config_hash(cfg)}",
        f"seed = {cfg.seed}",
        f"package_version = {__version__}",
        f"numpy_version = {np.__version__}",
        f"scipy_version = {scipy.__version__}",
    ]
    for name in sorted(inputs):
        lines.append(f"input.{name} = {_sha256(inputs[name])}")
    for name in sorted(artifacts):
        prefix = "output_measured" if name in measured else "output"
        lines.append(f"{prefix}.{name} = {_sha256(artifacts[name])}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_graph(cfg: AuditConfig):
    if not cfg.data_dir:
        raise MissingInputError("data_dir is not set (use --set data_dir=DIR)")
    data = Path(cfg.data_dir)
    if not (data / "edges.tsv").exists():
        raise MissingInputError(f"no graph artifacts under {data}")
    return load_graph_dir(data, schema=cfg)


def _require_params(cfg: AuditConfig):
    if not cfg.params_path:
        raise MissingInputError("params_path is not set (use --set params_path=FILE)")
    path = Path(cfg.params_path)
    if not path.exists():
        raise MissingInputError(f"parameter file {path} does not exist")
    return mdl.load_parameters(path)


def _graph_inputs(cfg: AuditConfig) -> dict:
    data = Path(cfg.data_dir)
    names = ["edges.tsv", "attributes.tsv", "train.ids", "val.ids", "test.ids"]
    return {f"data/{n}": data / n for n in names if (data / n).exists()}


def _tag(cfg: AuditConfig) -> str:
    return f"{cfg.metric}_seed{cfg.seed}_{config_hash(cfg)[:8]}"


def _cmd_gen(cfg, out):
    graph = synth_biased_graph(synth_config_from(cfg))
    policy = SplitPolicy(val_fraction=cfg.val_fraction, test_fraction=cfg.test_fraction,
                         train_fraction=cfg.train_fraction, train_cap=cfg.train_cap)
    graph = with_split(graph, cfg.seed, policy)
    paths = save_graph(graph, out)
    artifacts = {p.name: p for p in paths.values()}
    return artifacts, set(), {}


def _cmd_train(cfg, out):
    graph = _require_graph(cfg)
    params = mdl.train(graph, cfg, cfg.seed)
    params_path = out / "params.npz"
    mdl.save_parameters(params, params_path)
    report = metrics.bias_report(mdl.forward(params, graph), graph,
                                 reg=cfg.sinkhorn_reg, iters=cfg.sinkhorn_iters,
                                 tol=cfg.sinkhorn_tol)
    report_path = out / "bias_report.kv"
    report_path.write_text("\n".join(report.to_kv()) + "\n")
    return ({"params.npz": params_path, "bias_report.kv": report_path},
            set(), _graph_inputs(cfg))


def _cmd_audit(cfg, out):
    graph = _require_graph(cfg)
    params = _require_params(cfg)
    records = estimate_influences(params, graph, cfg)
    table_path = out / f"influence_{_tag(cfg)}.tsv"
    table_path.write_text(records_to_table(records))
    report = metrics.bias_report(mdl.forward(params, graph), graph,
                                 reg=cfg.sinkhorn_reg, iters=cfg.sinkhorn_iters,
                                 tol=cfg.sinkhorn_tol)
    summary = [f"records = {len(records)}",
               f"metric = {cfg.metric}",
               f"mix_lambda = {cfg.mix_lambda!r}",
               f"flagged = {sum(1 for r in records if r.flags)}"]
    summary += report.to_kv()
    kv_path = out / f"audit_{_tag(cfg)}.kv"
    kv_path.write_text("\n".join(summary) + "\n")
    inputs = _graph_inputs(cfg)
    inputs["params"] = Path(cfg.params_path)
    return {table_path.name: table_path, kv_path.name: kv_path}, set(), inputs


def _cmd_fidelity(cfg, out):
    graph = _require_graph(cfg)
    rep = oracle.fidelity_experiment(graph, cfg, cfg.seed, kind=cfg.metric)
    table = out / f"fidelity_{_tag(cfg)}.tsv"
    table.write_text(rep.to_table())
    kv = out / f"fidelity_{_tag(cfg)}.kv"
    kv.write_text("\n".join(rep.to_kv()) + "\n")
    return {table.name: table, kv.name: kv}, set(), _graph_inputs(cfg)


def _cmd_speedup(cfg, out):
    graph = _require_graph(cfg)
    rep = oracle.speedup_experiment(graph, cfg, cfg.seed)
    table = out / f"speedup_{_tag(cfg)}_timings.tsv"
    table.write_text(rep.to_table())
    kv = out / f"speedup_{_tag(cfg)}.kv"
    kv.write_text("\n".join(rep.to_kv()) + "\n")
    return ({table.name: table, kv.name: kv}, {table.name, kv.name},
            _graph_inputs(cfg))


def _cmd_consistency(cfg, out):
    graph = _require_graph(cfg)
    rep = oracle.consistency_experiment(graph, cfg, cfg.seed)
    table = out / f"consistency_{_tag(cfg)}.tsv"
    table.write_text(rep.to_table())
    kv = out / f"consistency_{_tag(cfg)}.kv"
    kv.write_text("\n".join(rep.to_kv()) + "\n")
    return {table.name: table, kv.name: kv}, set(), _graph_inputs(cfg)


def _cmd_prop1(cfg, out):
    graph = _require_graph(cfg)
    train_ids = graph.train_ids
    rng = rng_stream(cfg.seed, 20)
    centers = rng.choice(train_ids, size=min(cfg.prop_pairs, len(train_ids)),
                         replace=False)
    lines = ["center\ttest_node\tmeasured\tbound\tpaths\tdistance\tmin_geo_mean"]
    pairs = violations = 0
    for center in sorted(int(v) for v in centers):
        rep = oracle.representation_shift_bounds(graph, center, hops=cfg.prop_hops)
        for r in rep.rows:
            lines.append(f"{center}\t{r.test_node}\t{r.measured!r}\t{r.bound!r}"
                         f"\t{r.paths}\t{r.distance}\t{r.min_geo_mean!r}")
            pairs += 1
            violations += int(r.violated)
    table = out / f"bounds_seed{cfg.seed}_{config_hash(cfg)[:8]}.tsv"
    table.write_text("\n".join(lines) + "\n")
    kv = out / f"bounds_seed{cfg.seed}_{config_hash(cfg)[:8]}.kv"
    kv.write_text(f"pairs = {pairs}\nviolations = {violations}\n"
                  f"hops = {cfg.prop_hops}\ncenters = {len(centers)}\n")
    return {table.name: table, kv.name: kv}, set(), _graph_inputs(cfg)


def _cmd_debias(cfg, out):
    graph = _require_graph(cfg)
    rep = debias_mod.debias_run(graph, cfg)
    kv = out / f"debias_{_tag(cfg)}.kv"
    kv.write_text("\n".join(rep.to_kv()) + "\n")
    deleted = out / "deleted.ids"
    deleted.write_text("\n".join(str(v) for v in rep.deleted_nodes)
                       + ("\n" if rep.deleted_nodes else ""))
    pruned = remove_nodes(graph, list(rep.deleted_nodes)) if rep.deleted_nodes else graph
    pruned_paths = save_graph(pruned, out / "pruned")
    artifacts = {kv.name: kv, "deleted.ids": deleted}
    artifacts.update({f"pruned/{p.name}": p for p in pruned_paths.values()})
    return artifacts, set(), _graph_inputs(cfg)


if __name__ == "__main__":
    sys.exit(main())
