"""Run configuration: one flat record holding every tolerance, solver
setting, seed and budget, with key=value text round-tripping so the
effective settings can be persisted next to every artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

# Hessian-inverse iteration budget is tuned over this grid.
LISSA_GRID = (10, 50, 100, 500, 1000, 5000)

ARCHS = ("linear-softmax", "one-hidden")
SOLVERS = ("cg", "lissa")
METRICS = ("sp", "eo", "generalized", "mix")
GRAD_METHODS = ("auto", "sorted", "sinkhorn")


@dataclass
class AuditConfig:
    """Flat configuration for the whole pipeline. Defaults are the shipped
    settings; anything may be overridden from a config file or the CLI."""

    # model + training
    arch: str = "linear-softmax"
    epochs: int = 1000
    lr: float = 1e-3
    hidden_dim: int = 16
    damping: float = 0.01
    dropout: float = 0.5
    dropout_mode: str = "off"        # "off" (deterministic) or "paper"
    optimizer: str = "adam"          # "adam" or "gd", full batch either way
    refine_newton: bool = True       # Newton polish to stationarity (linear-softmax)
    refine_tol: float = 1e-10

    # inverse-Hessian solver
    solver: str = "cg"
    solver_tol: float = 1e-6
    solver_maxiter: int = 2000
    lissa_iters: int = 1000
    lissa_scale: float = 0.0         # 0 = calibrate from the operator norm

    # bias metric
    metric: str = "sp"
    mix_lambda: float = 0.5
    grad_method: str = "auto"        # sorted matching for binary, sinkhorn otherwise
    sinkhorn_reg: float = 1e-3
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6

    # influence engine
    stationarity_tol: float = 1e-3
    include_coupling: bool = True    # neighbor loss-shift term (ablation switch)
    hops: int = 1                    # aggregation depth of the shipped models
    workers: int = 1

    # splits
    val_fraction: float = 0.25
    test_fraction: float = 0.25
    train_fraction: float = 0.5
    train_cap: int = 500

    # experiments
    fidelity_max_size: int = 0       # 0 = min(20, m // 5)
    budgets: tuple = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
    budget_fraction: float = 0.10
    accuracy_guard: float = 0.05
    speedup_sample: int = 25
    prop_hops: int = 2
    prop_pairs: int = 120

    # synthetic data
    synth_n: int = 300
    synth_d: int = 8
    synth_balance: float = 0.5
    synth_homophily: float = 6.0
    synth_avg_degree: float = 18.0
    synth_attr_shift: float = 0.8
    synth_label_bias: float = 0.8
    synth_intercept: float = 3.0
    synth_degree_spread: float = 0.0
    synth_label_noise: float = 0.0

    # io
    seed: int = 1
    data_dir: str = ""
    params_path: str = ""
    id_col: str = "id"
    label_col: str = "label"
    sensitive_col: str = "sensitive"
    sensitive_arity: int = 0         # 0 = unchecked

    def validate(self) -> "AuditConfig":
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.solver == "lissa" and self.lissa_iters not in LISSA_GRID:
            raise ValueError(f"lissa_iters must come from {LISSA_GRID}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.grad_method not in GRAD_METHODS:
            raise ValueError(f"grad_method must be one of {GRAD_METHODS}")
        if self.dropout_mode not in ("off", "paper"):
            raise ValueError("dropout_mode must be 'off' or 'paper'")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise ValueError("mix_lambda must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("epochs", "hidden_dim", "solver_maxiter", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "solver_tol", "sinkhorn_reg", "sinkhorn_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.damping <= 0:
            raise ValueError("damping must be > 0 (the damped curvature must stay positive definite)")
        if not 0 < self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in (0, 1]")
        for b in self.budgets:
            if not 0 <= b <= 1:
                raise ValueError("budgets must lie in [0, 1]")
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction must leave room for training")
        return self


def serialize_config(cfg: AuditConfig) -> str:
    """Canonical key=value text (sorted keys, repr-exact floats)."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def parse_config(text: str, base: AuditConfig | None = None) -> AuditConfig:
    """Parse key=value lines ('#' starts a comment) on top of `base`."""
    cfg = dataclasses.replace(base) if base else AuditConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _set_field(cfg, key, value)
    return cfg


def apply_overrides(cfg: AuditConfig, overrides) -> AuditConfig:
    """Apply 'key=value' override strings (CLI --set) in order."""
    cfg = dataclasses.replace(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        _set_field(cfg, key, value)
    return cfg


def _set_field(cfg: AuditConfig, key: str, value: str) -> None:
    by_name = {f.name: f for f in fields(cfg)}
    if key not in by_name:
        raise ValueError(f"unknown config key {key!r}")
    current = getattr(cfg, key)
    setattr(cfg, key, _coerce(value, current, key))


def _coerce(value: str, current, key: str):
    if isinstance(current, bool):
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if not value.strip():
            return ()
        return tuple(float(v) for v in value.split(","))
    return value


def config_hash(cfg: AuditConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()
