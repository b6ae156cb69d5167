"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

WEIGHTINGS = ("sensitivity", "uniform")
OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "cosine")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:" if path else ""
        where += f"{line}: " if line is not None else (" " if path else "")
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class RunConfig:
    tasks: int = 5
    classes_per_task: int = 4
    input_dim: int = 32
    d: int = 16
    r: int = 4
    layers: int = 2
    k: int = 2
    sigma: float = 0.1
    epsilon: float = 1e-8
    lambda_sara: float = 0.6
    lambda_acr: float = 0.4
    gamma: float = 0.5
    lr: float = 0.003
    epochs: int = 10
    batch_size: int = 16
    samples_per_class: int = 1
    drift_samples: int = 32
    train_per_class: int = 100
    test_per_class: int = 50
    separation: float = 6.0
    mean_scale: float = 1.5
    input_scale: float = 1.0
    data_seed: int = 1993
    init_seed: int = 0
    sara_on: bool = True
    acr_on: bool = True
    weighting: str = "sensitivity"
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    mask_old_logits: bool = True
    expand_start_layer: int = 1

    def validate(self) -> "RunConfig":
        counts = ("tasks", "classes_per_task", "input_dim", "d", "r", "layers", "k", "epochs",
                  "batch_size", "samples_per_class", "drift_samples", "test_per_class",
                  "expand_start_layer")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_per_class < 2:
            raise ConfigError("train_per_class must be >= 2 (variance estimate)")
        if self.expand_start_layer > self.layers:
            raise ConfigError("expand_start_layer must not exceed layers")
        for name in ("lambda_sara", "lambda_acr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        for name in ("sigma", "epsilon", "lr", "input_scale", "mean_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.separation < 0:
            raise ConfigError("separation must be >= 0")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data_seed=seed, init_seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_BOOL = {"true": True, "1": True, "yes": True, "on": True,
         "false": False, "0": False, "no": False, "off": False}


def coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() not in _BOOL:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, path=None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        try:
            values[key] = coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, path) from None
    try:
        return RunConfig(**values).validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), None, path) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path)


def dump_config(cfg: RunConfig) -> str:
    lines = ["# run configuration"]
    for name, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
