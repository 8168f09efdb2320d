"""Run configuration: ``key = value`` text files with typed keys."""
from __future__ import annotations

from dataclasses import dataclass, fields

from speednet.model import ConfigError, SpeedNetConfig


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    data_root: str = ""
    class_name: str = ""
    img_size: int = 224
    epochs: int = 120
    batch_size: int = 4
    lr: float = 1e-3
    lr_factor: float = 0.1
    lr_patience: int = 12
    alpha: float = 0.3
    beta: float = 0.7
    smooth: float = 1.0
    variant: str = "full"
    seed: int = 0
    checkpoint_out: str = "speednet.ckpt"
    log_out: str = ""
    involution_k: int = 7
    involution_r: int = 4
    dilations: tuple[int, ...] = (1, 2, 4)
    encoder_channels: tuple[int, ...] = (32, 32, 64, 128)
    bottleneck_channels: int = 128
    decoder_channels: tuple[int, ...] = (64, 64, 32, 32, 32)
    train_fraction: float = 0.8
    prefetch: int = 2

    def model_config(self) -> SpeedNetConfig:
        return SpeedNetConfig(
            img_size=self.img_size, encoder_channels=self.encoder_channels,
            bottleneck_channels=self.bottleneck_channels, decoder_channels=self.decoder_channels,
            involution_k=self.involution_k, involution_r=self.involution_r,
            dilations=self.dilations, variant=self.variant, seed=self.seed)

    def log_path(self) -> str:
        return self.log_out or self.checkpoint_out + ".log"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{_key(f.name)} = {value}")
        return "\n".join(lines) + "\n"


def _key(field_name: str) -> str:
    return "class" if field_name == "class_name" else field_name


_FIELDS = {_key(f.name): f for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool, "tuple[int, ...]": _ints}


def _convert(key: str, raw: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    parser = _PARSERS[f.type]
    try:
        return f.name, parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) plus string overrides."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        name, value = _convert(key.strip(), raw)
        values[name] = value
    for key, raw in (overrides or {}).items():
        name, value = _convert(key, raw)
        values[name] = value
    cfg = RunConfig(**values)
    cfg.model_config().validate()
    return cfg


def load_config(path, overrides=None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), overrides)
