"""Flat ``key = value`` experiment configs with dotted sections.

Example::

    # one run, fully specified
    data.preset = conflict6
    model.embed_dim = 16
    model.hidden = 64,32
    train.strategy = mamdr
    train.alpha = 0.001
    run.seeds = 0,1,2

Sections: ``data`` (``path`` or ``preset``/SyntheticSpec fields, plus
``split_seed``), ``model`` (ModelSpec fields except the table sizes),
``train`` (TrainConfig fields) and ``run`` (``seeds``, ``out``, ``threads``).
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .nn import ModelSpec
from .strategies import TrainConfig

MODEL_KEYS = ("embed_dim", "hidden", "activation")
DATA_KEYS = ("path", "preset", "split_seed") + tuple(f.name for f in dataclasses.fields(SyntheticSpec))
RUN_KEYS = ("seeds", "out", "threads")
PRESETS = ("conflict6",)


def _defaults(cls):
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _coerce(text, like, key):
    """Parse ``text`` into the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(like[0]) if like else float
            return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    return text.strip()


@dataclass
class ExperimentConfig:
    data_path: str = None
    synthetic: dict = None
    split_seed: int = 0
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = None
    seeds: tuple = ()
    threads: int = 1
    source_text: str = ""

    def __post_init__(self):
        if self.data_path is not None and self.synthetic is not None:
            raise ConfigError("give either data.path or a synthetic data spec, not both")

    def synthetic_spec(self):
        values = dict(self.synthetic or {})
        preset = values.pop("preset", None)
        base = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            from .data import conflict6

            base = dataclasses.asdict(conflict6())
        base.update(values)
        try:
            return SyntheticSpec(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def model_spec(self, num_users, num_items):
        try:
            return ModelSpec(num_users, num_items, **self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def with_overrides(self, **train_kwargs):
        kw = {k: v for k, v in train_kwargs.items() if v is not None}
        if not kw:
            return self
        try:
            return dataclasses.replace(self, train=dataclasses.replace(self.train, **kw))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def parse(text):
    """Parse config text; unknown sections or keys are errors."""
    train_defaults = _defaults(TrainConfig)
    model_defaults = {k: v for k, v in _defaults(ModelSpec).items() if k in MODEL_KEYS}
    synth_defaults = _defaults(SyntheticSpec)
    train, model, synthetic = {}, {}, {}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix")
        if section == "train" and name in train_defaults:
            train[name] = _coerce(value, train_defaults[name], key)
        elif section == "model" and name in model_defaults:
            model[name] = _coerce(value, model_defaults[name], key)
        elif section == "data" and name in DATA_KEYS:
            if name == "path":
                kw["data_path"] = value
            elif name == "split_seed":
                kw["split_seed"] = _coerce(value, 0, key)
            elif name == "preset":
                synthetic["preset"] = value
            else:
                synthetic[name] = _coerce(value, synth_defaults[name], key)
        elif section == "run" and name in RUN_KEYS:
            if name == "seeds":
                kw["seeds"] = _coerce(value, (0,), key)
            elif name == "threads":
                kw["threads"] = _coerce(value, 1, key)
            else:
                kw["out"] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        train_cfg = TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        synthetic=synthetic or None, model=model, train=train_cfg, source_text=text, **kw
    )


def load(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"))


def dump(cfg):
    """Render ``cfg`` back to config text (used when no source file exists)."""
    lines = []
    if cfg.data_path is not None:
        lines.append(f"data.path = {cfg.data_path}")
    for k, v in (cfg.synthetic or {}).items():
        lines.append(f"data.{k} = {_render(v)}")
    lines.append(f"data.split_seed = {cfg.split_seed}")
    for k, v in cfg.model.items():
        lines.append(f"model.{k} = {_render(v)}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"train.{f.name} = {_render(getattr(cfg.train, f.name))}")
    if cfg.seeds:
        lines.append(f"run.seeds = {_render(cfg.seeds)}")
    return "\n".join(lines) + "\n"


def _render(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)
