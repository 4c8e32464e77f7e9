"""Flat ``key = value`` run configuration covering every ModelConfig and TrainConfig field.

A file may start from a named preset (``preset = smoke``); later keys override
it. Lines starting with ``#`` are comments.
"""
import ast
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cafm import ConfigError
from .detector import ModelConfig
from .training import TrainConfig

PRESETS = {
    # laptop-scale defaults: input 160, batch 16, the published optimizer settings
    "desk": {},
    # the published schedule and batch size
    "full": {"batch_size": 64, "epochs": 100, "lr0": 0.001},
    # 60-epoch synthetic run; mosaic shrinks every object 2x, so the second half
    # trains on full-scale images to match the validation distribution
    "smoke": {"epochs": 60, "close_mosaic": 0.5},
}

MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "desk"

    def to_dict(self):
        return {"preset": self.preset, "model": self.model.to_dict(), "train": self.train.to_dict()}

    def to_text(self):
        lines = [f"preset = {self.preset}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.model.to_dict().items()]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.train.to_dict().items()]
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(key, raw, default):
    """Parse ``raw`` to the type of the field's default value."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        try:
            return tuple(int(x) for x in raw.strip("()[] ").split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return ast.literal_eval(raw)


def parse_config_text(text, where="<config>"):
    """Return the ordered ``{key: raw string}`` pairs of a config file."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key != "preset" and key not in MODEL_KEYS and key not in TRAIN_KEYS:
            raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(overrides=None, preset=None):
    """Resolve preset + string/typed overrides into validated configs."""
    overrides = dict(overrides or {})
    file_preset = overrides.pop("preset", None)
    preset = preset or file_preset or "desk"  # an explicit argument beats the file
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    values.update(overrides)
    model_kw, train_kw = {}, {}
    mdef, tdef = ModelConfig(), TrainConfig()
    for key, v in values.items():
        if key in MODEL_KEYS:
            model_kw[key] = _coerce(key, v, getattr(mdef, key)) if isinstance(v, str) else v
        elif key in TRAIN_KEYS:
            train_kw[key] = _coerce(key, v, getattr(tdef, key)) if isinstance(v, str) else v
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(ModelConfig(**model_kw), train, preset)


def load_config(path=None, overrides=None, preset=None):
    """Read a config file (optional) and apply ``overrides`` on top."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values = parse_config_text(path.read_text(), str(path))
    values.update(overrides or {})
    return build_config(values, preset)
