"""Run configuration: a flat, explicitly typed ``key: type = value`` text format.

Example::

    # nina-mlp on the chunked task
    task: str = chunked8
    model: str = nina-mlp
    depth: int = 28
    sigma_noise: float = 0.03
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .decoder import FlowConfig
from .diffusion import DdpmConfig
from .taskgen import TASKS
from .training import TrainConfig

MODELS = ("nina-mlp", "nina-transformer", "ddpm")
_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "chunked8"
    model: str = "nina-mlp"
    depth: int = 28
    hidden: int = 64
    cond_layers: int = 3
    heads: int = 4
    sigma_noise: float = 0.03
    no_plu: bool = False
    no_noise: bool = False
    ddpm_steps: int = 50
    match_params: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip: float = 1.0
    epochs: int = 0
    steps: int = 2000
    batch: int = 80
    eval_every: int = 500
    dataset_size: int = 20000
    eval_samples: int = 2000
    radius: float = 3.0
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        positive = ("depth", "hidden", "cond_layers", "heads", "ddpm_steps", "batch", "dataset_size",
                    "eval_samples")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden % self.heads and self.model != "nina-mlp":
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.sigma_noise < 0 or self.lr <= 0 or self.radius <= 0:
            raise ConfigError("sigma_noise must be >= 0; lr and radius must be > 0")
        if self.steps < 0 or self.epochs < 0 or (self.steps == 0 and self.epochs == 0):
            raise ConfigError("set steps or epochs to a positive value")
        if self.model == "nina-transformer" and self.task == "bimodal2d":
            raise ConfigError("nina-transformer splits whole timesteps and needs a horizon >= 2")
        return self

    # ---------------------------------------------------------------- derived

    @property
    def effective_sigma(self) -> float:
        return 0.0 if self.no_noise else self.sigma_noise

    def train_steps(self, n_train: int) -> int:
        if self.steps:
            return self.steps
        return self.epochs * -(-n_train // self.batch)

    def flow_config(self, horizon: int, action_dim: int, ctx_dim: int) -> FlowConfig:
        return FlowConfig(variant=self.model.split("-", 1)[1], horizon=horizon, action_dim=action_dim,
                          ctx_dim=ctx_dim, depth=self.depth, hidden=self.hidden,
                          cond_layers=self.cond_layers, heads=self.heads,
                          sigma_noise=self.effective_sigma, use_plu=not self.no_plu, seed=self.seed)

    def ddpm_config(self, horizon: int, action_dim: int, ctx_dim: int) -> DdpmConfig:
        return DdpmConfig(horizon=horizon, action_dim=action_dim, ctx_dim=ctx_dim, hidden=self.hidden,
                          cond_layers=self.cond_layers, heads=self.heads, steps=self.ddpm_steps,
                          seed=self.seed)

    def train_config(self, n_train: int) -> TrainConfig:
        return TrainConfig(steps=self.train_steps(n_train), batch=self.batch, lr=self.lr,
                           beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay,
                           clip=self.clip, eval_every=self.eval_every, seed=self.seed)

    # ------------------------------------------------------------------ text

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}: {_type_name(f.type)} = {_fmt(value)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


def _type_name(tp) -> str:
    return tp if isinstance(tp, str) else tp.__name__


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _field_types() -> dict[str, str]:
    return {f.name: _type_name(f.type) for f in fields(RunConfig)}


def _coerce(key: str, type_name: str, raw: str):
    raw = raw.strip()
    try:
        if type_name == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        return _TYPES[type_name](raw)
    except (ValueError, KeyError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {type_name}") from None


def parse_config(text: str, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Parse the text format; unknown keys and type mismatches are errors."""
    declared = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            head, raw = line.split("=", 1)
            key, type_name = (part.strip() for part in head.split(":", 1))
        except ValueError:
            raise ConfigError(f"line {lineno}: expected 'key: type = value', got {line!r}") from None
        if key not in declared:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if type_name != declared[key]:
            raise ConfigError(f"line {lineno}: {key} is declared {type_name}, expected {declared[key]}")
        values[key] = _coerce(key, type_name, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in declared:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = _coerce(key, declared[key], raw)
    return RunConfig(**values).validate()


def load_config(path: str | Path, overrides=()) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)
