"""Run configuration: file parsing, flag overrides, and validation.

A config is a flat set of fields; files use ``key = value`` lines (``#``
comments allowed) and CLI flags override file values. Validation checks
everything before any computation runs and reports all problems at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

EXPERIMENTS = ("one_d_grid", "one_d_traj", "rotation", "reweight", "scaling")
METHODS = ("evograd", "t1t2", "oracle", "baseline-no-meta")
NOISE_KINDS = ("gaussian", "sign-gaussian")
SWEEP_DIMENSIONS = ("model_width", "hyperparam_count", "population_k")

# which training methods each experiment's runner accepts
METHODS_BY_EXPERIMENT = {
    "one_d_grid": ("evograd",),                      # oracle column always included
    "one_d_traj": ("evograd", "oracle"),
    "rotation": ("evograd", "baseline-no-meta"),
    "reweight": ("evograd", "baseline-no-meta"),
    "scaling": ("evograd",),                          # sweeps probe both methods
}


@dataclass
class ExperimentConfig:
    experiment: str = ""
    method: str = "evograd"
    seeds: tuple = (0, 1, 2, 3, 4)
    # estimator knobs; None means the problem's documented default
    sigma: float | None = None
    tau: float | None = None
    k: tuple = ()
    noise_kind: str | None = None
    # training knobs
    lr: float | None = None
    meta_lr: float | None = None
    steps: int | None = None
    warmup_steps: int | None = None
    n_train: int | None = None
    reps: int | None = None
    true_angle: float | None = None
    rho: float | None = None
    # scaling sweep
    sweep_dimension: str | None = None
    sweep_grid: tuple = ()
    probe_steps: int = 5
    # output
    out: str | None = None
    dump_tape: str | None = None


class ConfigError(ValueError):
    """Carries every field-level problem found during validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("seeds", "k"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if key == "sweep_grid":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if key in ("experiment", "method", "noise_kind", "sweep_dimension", "out", "dump_tape"):
        return raw
    if key in ("steps", "warmup_steps", "n_train", "reps", "probe_steps"):
        return int(raw)
    if key in ("sigma", "tau", "lr", "meta_lr", "true_angle", "rho"):
        return float(raw)
    raise KeyError(key)


def parse_config_file(path) -> dict:
    """``key = value`` pairs; unknown keys and bad values become ConfigError."""
    values, problems = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"{path}:{lineno}: expected key = value, got {line!r}")
                continue
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                problems.append(f"{path}:{lineno}: unknown key {key!r}")
                continue
            try:
                values[key] = _parse_value(key, raw)
            except (ValueError, KeyError):
                problems.append(f"{path}:{lineno}: bad value for {key}: {raw!r}")
    if problems:
        raise ConfigError(problems)
    return values


def build_config(file_values: dict | None, overrides: dict) -> "ExperimentConfig":
    """Merge file values with flag overrides (overrides win) and validate."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = [k for k in merged if k not in _FIELD_TYPES]
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    cfg = ExperimentConfig(**merged)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    problems = []
    if cfg.experiment not in EXPERIMENTS:
        problems.append(f"experiment: must be one of {', '.join(EXPERIMENTS)}, "
                        f"got {cfg.experiment!r}")
    if cfg.method not in METHODS:
        problems.append(f"method: must be one of {', '.join(METHODS)}, got {cfg.method!r}")
    elif cfg.experiment in METHODS_BY_EXPERIMENT:
        allowed = METHODS_BY_EXPERIMENT[cfg.experiment]
        if cfg.method not in allowed:
            problems.append(f"method: {cfg.method!r} is not available for "
                            f"{cfg.experiment} (allowed: {', '.join(allowed)})")

    if not cfg.seeds:
        problems.append("seeds: at least one seed required")
    elif not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        problems.append(f"seeds: must be non-negative integers, got {cfg.seeds}")

    if cfg.sigma is not None and not cfg.sigma >= 0:
        problems.append(f"sigma: must be >= 0, got {cfg.sigma}")
    if cfg.tau is not None and not cfg.tau > 0:
        problems.append(f"tau: must be > 0, got {cfg.tau}")
    for kk in cfg.k:
        if kk < 2:
            problems.append(f"k: population sizes must be >= 2, got {kk}")
    if len(cfg.k) > 1 and cfg.experiment != "one_d_grid":
        problems.append("k: multiple population sizes only make sense for one_d_grid")
    if cfg.noise_kind is not None and cfg.noise_kind not in NOISE_KINDS:
        problems.append(f"noise_kind: must be one of {', '.join(NOISE_KINDS)}, "
                        f"got {cfg.noise_kind!r}")

    for name in ("lr", "meta_lr"):
        v = getattr(cfg, name)
        if v is not None and not v > 0:
            problems.append(f"{name}: must be > 0, got {v}")
    for name in ("steps", "warmup_steps", "n_train", "reps", "probe_steps"):
        v = getattr(cfg, name)
        if v is not None and v < 0:
            problems.append(f"{name}: must be >= 0, got {v}")
    if cfg.rho is not None and not 0.0 <= cfg.rho <= 0.9:
        problems.append(f"rho: must be within [0, 0.9], got {cfg.rho}")

    if cfg.experiment == "scaling":
        if cfg.sweep_dimension not in SWEEP_DIMENSIONS:
            problems.append(f"sweep_dimension: must be one of {', '.join(SWEEP_DIMENSIONS)}, "
                            f"got {cfg.sweep_dimension!r}")
        if not cfg.sweep_grid:
            problems.append("sweep_grid: scaling needs a non-empty grid")
        elif any(g < 1 for g in cfg.sweep_grid):
            problems.append(f"sweep_grid: entries must be >= 1, got {cfg.sweep_grid}")

    if problems:
        raise ConfigError(problems)
