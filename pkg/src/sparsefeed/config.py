"""Experiment configuration: a small ``key = value`` format with ``[problem]`` sections.

Example::

    method = s_sgd_ef
    P = 8
    k_ratio = 0.1
    eta = 0.01
    T = 1000

    [problem]
    kind = quadratic
    d = 100
    L = 10
    mu = 0.1
    n = 16

Keys inside ``[problem]`` may also be written as ``problem.<key>`` at top level.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace

METHODS = ("parallel_sgd", "naive_sparse", "topk_ef", "s_sgd_ef", "snag", "s_snag_ef", "reg_s_snag_ef", "nag")
PROBLEM_KINDS = ("quadratic", "logreg", "nonconvex")
OUTPUT_RULES = ("last", "uniform", "geometric")
SPLIT_METHODS = ("s_snag_ef", "reg_s_snag_ef")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ProblemConfig:
    kind: str
    d: int | None = None
    L: float | None = None
    mu: float | None = None
    n: int | None = None
    b_scale: float = 1.0
    worker_shift: float = 0.0
    reg_weight: float = 1.0
    path: str | None = None
    test_path: str | None = None
    label_column: int = -1
    l2: float = 1e-3
    normalize: bool = True
    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 4
    data_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    problem: ProblemConfig
    P: int
    eta: float
    T: int
    k: int | None = None
    k_ratio: float | None = None
    mu_hint: float | None = None
    gamma: float | None = None
    sigma: float = 0.0
    S: int = 1
    seed: int = 0
    log_every: int | None = None
    repeats: int = 1
    output_rule: str = "last"
    full_batch: bool = False
    x0_scale: float = 0.0
    with_replacement: bool = False
    z_correction: str = "mixed_memory"
    y_anchor: str = "x"

    def problem_dim(self) -> int | None:
        """Optimization dimension when known without loading data."""
        if self.problem.kind in ("quadratic", "nonconvex"):
            return self.problem.d
        return None

    def resolve_k(self, d: int) -> int:
        """Absolute k for dimension d: ``k`` as given, or ``k_ratio * d`` rounded half up."""
        if self.k is not None:
            k = self.k
        else:
            k = max(1, math.floor(self.k_ratio * d + 0.5))
            if self.method in SPLIT_METHODS:
                k = max(k, 2)
        if not 1 <= k <= d:
            raise ConfigError("k", f"resolved k={k} must lie in [1, d={d}]")
        if self.method in SPLIT_METHODS and k < 2:
            raise ConfigError("k", f"{self.method} splits k over two messages and needs k >= 2")
        return k

    def resolve_gamma(self, d: int) -> float:
        return self.gamma if self.gamma is not None else 0.5 * self.resolve_k(d) / d


_RUN_TYPES = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "problem"}
_PROBLEM_TYPES = {f.name: f.type for f in fields(ProblemConfig)}
_REQUIRED_RUN = ("method", "P", "eta", "T")
_REQUIRED_PROBLEM = {
    "quadratic": ("d", "L", "mu", "n"),
    "nonconvex": ("d", "n"),
    "logreg": (),
}


def _convert(key, type_name, raw: str):
    base = type_name.replace(" | None", "")
    if raw.lower() in ("none", "") and "None" in type_name:
        return None
    try:
        if base == "int":
            value = float(raw) if any(c in raw for c in ".eE") else int(raw)
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError
                value = int(value)
            return value
        if base == "float":
            return float(raw)
        if base == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
    except ValueError:
        raise ConfigError(key, f"expected {base}, got {raw!r}") from None
    return raw


def _read_pairs(text: str):
    section = None
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section != "problem":
                raise ConfigError(f"[{section}]", f"unknown section on line {lineno}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section and not key.startswith("problem."):
            key = f"{section}.{key}"
        if key in pairs:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        pairs[key] = value
    return pairs


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; defaults are applied and every error names its key."""
    pairs = _read_pairs(text)
    run, prob = {}, {}
    for key, raw in pairs.items():
        if key.startswith("problem."):
            name = key[len("problem."):]
            if name not in _PROBLEM_TYPES:
                raise ConfigError(key, "unknown key")
            prob[name] = _convert(key, _PROBLEM_TYPES[name], raw)
        else:
            if key not in _RUN_TYPES:
                raise ConfigError(key, "unknown key")
            run[key] = _convert(key, _RUN_TYPES[key], raw)
    for key in _REQUIRED_RUN:
        if key not in run:
            raise ConfigError(key, "missing required key")
    if "kind" not in prob:
        raise ConfigError("problem.kind", "missing required key")
    cfg = ExperimentConfig(problem=ProblemConfig(**prob), **run)
    validate(cfg)
    d = cfg.problem_dim()
    if d is not None and cfg.gamma is None:
        cfg = replace(cfg, gamma=cfg.resolve_gamma(d))
    return cfg


def _positive(key, value, allow_zero=False):
    if value is None:
        return
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(key, f"must be {'>= 0' if allow_zero else '> 0'}, got {value}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    pc = cfg.problem
    if cfg.method not in METHODS:
        raise ConfigError("method", f"unknown method {cfg.method!r}; expected one of {', '.join(METHODS)}")
    if pc.kind not in PROBLEM_KINDS:
        raise ConfigError("problem.kind", f"unknown kind {pc.kind!r}; expected one of {', '.join(PROBLEM_KINDS)}")
    for key in _REQUIRED_PROBLEM[pc.kind]:
        if getattr(pc, key) is None:
            raise ConfigError(f"problem.{key}", f"missing required key for {pc.kind}")
    if pc.kind == "quadratic" and pc.mu > pc.L:
        raise ConfigError("problem.mu", f"mu={pc.mu} exceeds L={pc.L}")
    for key in ("d", "n", "L", "mu"):
        _positive(f"problem.{key}", getattr(pc, key))
    _positive("problem.l2", pc.l2, allow_zero=True)
    if (cfg.k is None) == (cfg.k_ratio is None):
        which = "both given" if cfg.k is not None else "neither given"
        raise ConfigError("k", f"exactly one of k and k_ratio is required ({which})")
    if cfg.k_ratio is not None and not 0 < cfg.k_ratio <= 1:
        raise ConfigError("k_ratio", f"must lie in (0, 1], got {cfg.k_ratio}")
    _positive("k", cfg.k)
    _positive("P", cfg.P)
    _positive("eta", cfg.eta)
    _positive("T", cfg.T, allow_zero=True)
    _positive("S", cfg.S)
    _positive("repeats", cfg.repeats)
    _positive("log_every", cfg.log_every)
    _positive("sigma", cfg.sigma, allow_zero=True)
    if cfg.gamma is not None and not 0 <= cfg.gamma <= 1:
        raise ConfigError("gamma", f"must lie in [0, 1], got {cfg.gamma}")
    if cfg.method in ("s_snag_ef", "snag", "nag") and not (cfg.mu_hint or 0) > 0:
        raise ConfigError("mu_hint", f"{cfg.method} needs mu_hint > 0 for its parameter schedule")
    if cfg.method == "reg_s_snag_ef" and not cfg.sigma > 0:
        raise ConfigError("sigma", "reg_s_snag_ef needs sigma > 0")
    if cfg.output_rule not in OUTPUT_RULES:
        raise ConfigError("output_rule", f"expected one of {', '.join(OUTPUT_RULES)}")
    if cfg.z_correction not in ("mixed_memory", "y_memory"):
        raise ConfigError("z_correction", "expected mixed_memory or y_memory")
    if cfg.y_anchor not in ("x", "y"):
        raise ConfigError("y_anchor", "expected x or y")
    d = cfg.problem_dim()
    if d is not None:
        cfg.resolve_k(d)
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c`` for parsed configs."""
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "problem":
            continue
        value = getattr(cfg, f.name)
        if value is not None:
            lines.append(f"{f.name} = {_fmt(value)}")
    lines.append("")
    lines.append("[problem]")
    for f in fields(ProblemConfig):
        value = getattr(cfg.problem, f.name)
        if value is not None:
            lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def fingerprint(cfg: ExperimentConfig) -> str:
    """Short content hash of the canonical form."""
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:16]


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply ``{key: value}`` overrides and revalidate.

    Keys are run keys, ``problem.<key>`` or bare problem keys. A gamma that was
    defaulted is recomputed for the new k and d unless overridden itself.
    """
    pairs = _read_pairs(format_config(cfg))
    d = cfg.problem_dim()
    if "gamma" not in overrides and d is not None and cfg.gamma == 0.5 * cfg.resolve_k(d) / d:
        del pairs["gamma"]
    for key, value in overrides.items():
        if key in _RUN_TYPES or key.startswith("problem."):
            full = key
        elif key in _PROBLEM_TYPES:
            full = f"problem.{key}"
        else:
            raise ConfigError(key, "unknown key")
        if full in ("k", "k_ratio"):
            pairs.pop("k_ratio" if full == "k" else "k", None)
        pairs[full] = _fmt(value)
    return parse_config("\n".join(f"{k} = {v}" for k, v in pairs.items()))
