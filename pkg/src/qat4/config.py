"""Run configuration and its plain-text ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Keys are RunConfig field names;
booleans accept true/false/yes/no/on/off/1/0.
"""

from dataclasses import dataclass, fields

from .data import AugmentConfig
from .model import ModelConfig
from .optim import LrSchedule, OptimConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "cifar10"
    data_dir: str = "data"
    out_dir: str = "runs/default"
    epochs: int = 150
    batch_size: int = 128
    seed: int = 0
    lr: float = 1e-3
    eta_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    clip_norm: float = 0.5
    tanh_clip_scale: float = 3.0
    dropout: float = 0.5
    schedule: str = "restart"
    t0: float = 100.0
    t_mult: float = 1.0
    tanh_clip: bool = True
    per_layer_scaling: bool = True
    grad_clip: bool = True
    quantization: bool = True
    rounding: str = "half_away"
    checkpoint_every: int = 1
    eval_batch_size: int = 500
    threads: int = 0
    limit_train: int = 0
    limit_test: int = 0
    norm_mean: str = ""  # comma-separated per-channel values; empty = dataset default
    norm_std: str = ""

    def validate(self):
        if self.dataset not in ("cifar10", "cifar100"):
            raise ConfigError(f"dataset must be cifar10 or cifar100, got {self.dataset!r}")
        if self.schedule not in ("restart", "no-restart"):
            raise ConfigError(f"schedule must be restart or no-restart, got {self.schedule!r}")
        if self.rounding not in ("half_away", "half_even"):
            raise ConfigError(f"unknown rounding mode {self.rounding!r}")
        for name in ("epochs", "batch_size", "checkpoint_every", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.eta_min < 0 or self.eta_min > self.lr:
            raise ConfigError("need 0 <= eta_min <= lr and lr > 0")
        if self.t0 <= 0 or self.t_mult < 1:
            raise ConfigError("need t0 > 0 and t_mult >= 1")
        aug = self.augment_config()
        if min(aug.std) <= 0:
            raise ConfigError("norm_std values must be positive")
        return self

    @property
    def num_classes(self):
        return 100 if self.dataset == "cifar100" else 10

    def model_config(self):
        return ModelConfig(num_classes=self.num_classes, dropout_p=self.dropout,
                           quantize=self.quantization,
                           per_layer_scaling=self.per_layer_scaling,
                           fixed_clip_bound=self.tanh_clip_scale, rounding=self.rounding)

    def optim_config(self):
        return OptimConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps,
                           weight_decay=self.weight_decay, clip_norm=self.clip_norm,
                           tanh_clip_scale=self.tanh_clip_scale, grad_clip=self.grad_clip,
                           tanh_clip=self.tanh_clip)

    def lr_schedule(self):
        return LrSchedule(base_lr=self.lr, t0=self.t0, t_mult=self.t_mult, eta_min=self.eta_min,
                          restarts=self.schedule == "restart", total_epochs=self.epochs)

    def augment_config(self):
        cfg = AugmentConfig.for_dataset(self.dataset)
        if self.norm_mean:
            cfg.mean = _channels("norm_mean", self.norm_mean)
        if self.norm_std:
            cfg.std = _channels("norm_std", self.norm_std)
        return cfg


def _channels(name, text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{name}: expected three comma-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise ConfigError(f"{name}: expected three values, got {len(values)}")
    return values


def _coerce(field, raw):
    raw = raw.strip()
    if field.type in (bool, "bool"):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    kind = {"int": int, "float": float, "str": str}.get(field.type, field.type)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text, source="<config>"):
    byname = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in byname:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(byname[key], raw)
    return values


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), path)


def format_config(cfg):
    lines = ["# resolved qat4 run configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def resolve(overrides=None, config_file=None):
    """Built-in defaults < config file < explicit overrides."""
    values = load_config_file(config_file) if config_file else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()
