"""UTF-8 ``key = value`` configuration files and typed dataclass configs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .exceptions import ConfigError


def parse_kv(text):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def format_kv(items):
    return "".join(f"{k}={v}\n" for k, v in items)


def _coerce(value, default, key):
    if isinstance(default, bool):
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return str(value)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class KVConfigMixin:
    """Round-trip a flat dataclass through key-value text."""

    @classmethod
    def from_dict(cls, values, strict=True):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                if strict:
                    raise ConfigError(f"unknown config key {key!r}")
                continue
            default = known[key].default
            kwargs[key] = _coerce(value, default, key) if isinstance(value, str) else value
        return cls(**kwargs)

    @classmethod
    def from_kv(cls, text, strict=True):
        return cls.from_dict(parse_kv(text), strict=strict)

    def to_kv(self):
        return format_kv((f.name, _fmt(getattr(self, f.name))) for f in dataclasses.fields(self))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ModelConfig(KVConfigMixin):
    vocab_size: int = 64
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_blocks: int = 2
    n_experts: int = 4
    max_len: int = 128
    capacity_factor: float = 1.25
    router_mode: str = "dynamic"
    fixed_k: int = 1
    head: str = "lm"
    num_classes: int = 2
    activation: str = "relu"
    causal: bool = False
    renormalize_gates: bool = False
    precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not 1 <= self.fixed_k <= self.n_experts:
            raise ConfigError(f"fixed_k={self.fixed_k} outside [1, {self.n_experts}]")
        if self.router_mode not in ("dynamic", "fixed"):
            raise ConfigError(f"router_mode must be 'dynamic' or 'fixed', got {self.router_mode!r}")
        if self.head not in ("lm", "classifier"):
            raise ConfigError(f"head must be 'lm' or 'classifier', got {self.head!r}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be 'relu' or 'gelu', got {self.activation!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        for name in ("vocab_size", "d_ff", "n_blocks", "max_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.capacity_factor > 0:
            raise ConfigError("capacity_factor must be positive")


# BERT-base sized configuration, for shape checks only.
BASE_SCALE = ModelConfig(d_model=768, d_ff=3072, n_heads=12, n_experts=8)


@dataclass
class RunConfig(KVConfigMixin):
    """Model hyperparameters plus optimiser, data and output settings."""

    # model
    vocab_size: int = 0          # 0: take from the tokenizer
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_blocks: int = 2
    n_experts: int = 4
    max_len: int = 64
    capacity_factor: float = 1.25
    router_mode: str = "dynamic"
    fixed_k: int = 1
    activation: str = "relu"
    renormalize_gates: bool = False
    precision: str = "single"
    # task / data
    task: str = "lm"             # lm | classify
    data: str = ""               # path; empty uses the bundled dataset
    tokenizer: str = "char"
    seq_len: int = 64
    num_classes: int = 2
    # optimisation
    steps: int = 500
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_loss_coef: float = 0.0
    seed: int = 0
    # output
    out: str = ""
    run_name: str = ""
    save_checkpoint: bool = True

    def __post_init__(self):
        if self.task not in ("lm", "classify"):
            raise ConfigError(f"task must be 'lm' or 'classify', got {self.task!r}")
        if self.tokenizer not in ("char", "whitespace"):
            raise ConfigError(f"tokenizer must be 'char' or 'whitespace', got {self.tokenizer!r}")
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("steps must be >= 0, batch_size and seq_len >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_kv(text)

    def model_config(self, vocab_size, max_len=None):
        return ModelConfig(
            vocab_size=self.vocab_size or vocab_size,
            d_model=self.d_model,
            d_ff=self.d_ff,
            n_heads=self.n_heads,
            n_blocks=self.n_blocks,
            n_experts=self.n_experts,
            max_len=max(self.max_len, max_len or 0, self.seq_len),
            capacity_factor=self.capacity_factor,
            router_mode=self.router_mode,
            fixed_k=self.fixed_k,
            head="lm" if self.task == "lm" else "classifier",
            num_classes=self.num_classes,
            activation=self.activation,
            causal=self.task == "lm",
            renormalize_gates=self.renormalize_gates,
            precision=self.precision,
            seed=self.seed,
        )
