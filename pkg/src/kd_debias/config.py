"""Run configuration: ``key=value`` files merged with command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .data import SyntheticConfig
from .distiller import DistillConfig
from .teacher import TeacherConfig


@dataclass
class RunConfig:
    data: str = ""
    unbiased: str = ""
    out: str = "runs/default"
    seed: int = 0
    synthetic: bool = False
    # teacher
    dim: int = 40
    envs: int = 2
    alpha: float = 1.9
    beta: float = 9.9
    lr_teacher: float = 0.003
    warmup: int = 3
    detach_inv_in_var: bool = False
    # distillation
    gamma: float = 0.17
    lr_distill: float = 0.005
    mode: str = "full"
    # shared optimizer settings
    epochs: int = 10
    batch: int = 1024
    l2: float = 0.0
    # evaluation
    k: list[int] = field(default_factory=lambda: [5])
    full_catalog: bool = False
    threshold: float = 3.0
    # synthetic data
    users: int = 200
    items: int = 200
    latent_dim: int = 8
    bias_strength: float = 2.0
    exposure_skew: float = 1.0
    per_user: int = 50

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(dim=self.dim, num_envs=self.envs, alpha=self.alpha, beta=self.beta,
                             lr=self.lr_teacher, epochs=self.epochs, batch_size=self.batch,
                             warmup_epochs=self.warmup, l2=self.l2, seed=self.seed,
                             detach_inv_in_var=self.detach_inv_in_var)

    def distill_config(self, mode: str | None = None) -> DistillConfig:
        return DistillConfig(gamma=self.gamma, lr=self.lr_distill, dim=self.dim, epochs=self.epochs,
                             batch_size=self.batch, l2=self.l2, seed=self.seed,
                             mode=self.mode if mode is None else mode)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(num_users=self.users, num_items=self.items, latent_dim=self.latent_dim,
                               num_envs=self.envs, bias_strength=self.bias_strength,
                               exposure_skew=self.exposure_skew, positives_per_user=self.per_user,
                               seed=self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


class ConfigError(ValueError):
    pass


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(name: str, raw: str):
    """Convert a textual value to the type of ``RunConfig.<name>``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(RunConfig(), name)
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if isinstance(default, list):
            return [int(x) for x in raw.split(",") if x.strip()]
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value")
        key = key.strip().replace("-", "_")
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{n}: {exc}") from None
    return values


def load_config(path, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read(), str(path))
    values.update(overrides or {})
    return RunConfig(**values)
