"""Run configuration: a TOML file with flat sections, every key defaulted.

::

    [run]    task, manifest, out_dir, checkpoint, view, slice_offsets, method
    [train]  TrainConfig fields (learning_rate, batch_size, epochs, seed, ...)
    [loss]   lambda_pix, lambda_perct, lambda_gan, lambda_patch
    [model]  ModelConfig fields (stem_channels, feature_channels, alpha, ...)
    [eval]   wm_threshold, profile_offsets, figures, pca_batch_size, probe_folds

Relative paths in ``[run]`` are resolved against the config file's directory.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigInvalid
from .networks import ModelConfig
from .objectives import LossWeights
from .trainer import TASK_MODALITIES, TrainConfig

VIEW_CHOICES = ("axial", "coronal", "sagittal", "all")


@dataclass
class RunSection:
    task: str = "t1_to_fa"
    manifest: str = ""
    out_dir: str = "runs/default"
    checkpoint: str = ""
    view: str = "axial"
    slice_offsets: list = field(default_factory=lambda: [0])
    method: str = "Macro2Micro"


@dataclass
class EvalSection:
    wm_threshold: float = 0.2
    profile_offsets: list = field(default_factory=lambda: [0])
    figures: bool = True
    pca_batch_size: int = 200
    probe_folds: int = 5


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def loss(self):
        return self.train.loss_weights

    @property
    def model(self):
        return self.train.model

    def to_dict(self):
        train = asdict(self.train)
        return {"run": asdict(self.run), "train": {k: v for k, v in train.items()
                                                    if k not in ("loss_weights", "model")},
                "loss": train["loss_weights"], "model": train["model"], "eval": asdict(self.eval)}


def _check_keys(section, values, cls, skip=()):
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = set(values) - known
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def build_config(raw, base_dir=None):
    """Validate a nested mapping (as parsed from TOML) into a RunConfig."""
    raw = {k: dict(v) for k, v in raw.items()}
    allowed = {"run", "train", "loss", "model", "eval"}
    if set(raw) - allowed:
        raise ConfigInvalid(f"unknown section(s): {', '.join(sorted(set(raw) - allowed))}")
    try:
        _check_keys("run", raw.get("run", {}), RunSection)
        _check_keys("eval", raw.get("eval", {}), EvalSection)
        _check_keys("train", raw.get("train", {}), TrainConfig, skip=("loss_weights", "model"))
        _check_keys("loss", raw.get("loss", {}), LossWeights)
        _check_keys("model", raw.get("model", {}), ModelConfig)
        run = RunSection(**raw.get("run", {}))
        ev = EvalSection(**raw.get("eval", {}))
        train_kw = dict(raw.get("train", {}))
        model_kw = dict(raw.get("model", {}))
        model_kw.setdefault("input_size", train_kw.get("image_size", 256))
        train = TrainConfig(loss_weights=LossWeights(**raw.get("loss", {})),
                            model=ModelConfig(**model_kw), **train_kw)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc
    if run.task not in TASK_MODALITIES:
        raise ConfigInvalid(f"task must be one of {sorted(TASK_MODALITIES)}, got {run.task!r}")
    if run.view not in VIEW_CHOICES:
        raise ConfigInvalid(f"view must be one of {VIEW_CHOICES}, got {run.view!r}")
    if base_dir is not None:
        for key in ("manifest", "out_dir", "checkpoint"):
            val = getattr(run, key)
            if val and not Path(val).is_absolute():
                setattr(run, key, str(Path(base_dir) / val))
    return RunConfig(run, train, ev)


def parse_value(text):
    """Interpret an override value with TOML syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=None):
    """Read ``path`` (optional) and apply ``{"section.key": value}`` overrides."""
    raw, base = {}, None
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        base = path.parent
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigInvalid(f"override {dotted!r} must look like section.key")
        raw.setdefault(section, {})[key] = value
    return build_config(raw, base)


def dump_config(cfg):
    """Serialize to TOML text (flat sections)."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is None:
                continue
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'
