"""Run configuration: INI sections mapped onto the module dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig, ConfigError, GridConfig
from .evalkit import EvalConfig
from .model import ModelConfig
from .optim import OptimConfig
from .scenegen import SceneConfig
from .setloss import LossConfig
from .transformer import DecoderConfig, EncoderConfig

ROOT_ENV = "LI3DETR_ROOT"


@dataclass
class DataConfig:
    root: str = "data"
    train_split: str = "train"
    val_split: str = "val"
    seed: int = 0
    train: int = 200
    val: int = 50


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    max_steps: int = 0  # caps the step count; 0: no cap
    batch_size: int = 1
    threads: int = 1
    shuffle: bool = True
    log_every: int = 25
    eval_every: int = 0  # steps; 0 disables periodic validation
    checkpoint_every: int = 0  # steps; 0 keeps only the initial and final checkpoints
    checkpoint_dir: str = "runs/default"


@dataclass
class InferenceConfig:
    topk: int = 300
    layer: int = -1


@dataclass
class DistillConfig:
    teacher: str = ""
    kd_weight: float = 0.5
    score_floor: float = 0.3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    gen: SceneConfig = field(default_factory=SceneConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    base_dir: str = field(default=".", compare=False)

    def model_config(self) -> ModelConfig:
        grid = dataclasses.replace(self.grid, pc_range=tuple(self.gen.pc_range))
        return ModelConfig(grid, self.backbone, self.encoder, self.decoder)

    def resolve(self, path: str) -> Path:
        """Relative paths hang off $LI3DETR_ROOT when set, else the config file's directory."""
        p = Path(path)
        if p.is_absolute():
            return p
        return Path(os.environ.get(ROOT_ENV) or self.base_dir) / p

    @property
    def data_root(self) -> Path:
        return self.resolve(self.data.root)

    @property
    def checkpoint_dir(self) -> Path:
        return self.resolve(self.train.checkpoint_dir)


SECTIONS = ("data", "gen", "grid", "backbone", "encoder", "decoder", "loss", "optim",
            "train", "inference", "eval", "distill")

# fields that are not plain scalars / number lists
_SKIP = {("gen", "classes"), ("grid", "pc_range")}


# ---------------------------------------------------------------- value codecs


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ", ".join(f"{k}:{_format(v)}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ", ".join(":".join(_format(x) for x in v) if isinstance(v, (list, tuple))
                         else _format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse(text: str, like):
    if isinstance(like, dict):
        out = {}
        sample = next(iter(like.values()), 0.0)
        for item in filter(None, (s.strip() for s in text.split(","))):
            k, v = item.split(":")
            out[k.strip()] = _parse_scalar(v, sample)
        return out
    if isinstance(like, (list, tuple)):
        items = [s for s in (s.strip() for s in text.split(",")) if s]
        if like and isinstance(like[0], (list, tuple)):
            proto = like[0]
            vals = [tuple(_parse_scalar(x, p) for x, p in zip(it.split(":"), proto)) for it in items]
            if any(len(v) != len(proto) for v in vals):
                raise ValueError(f"expected {len(proto)} ':'-separated fields per item")
        else:
            proto = like[0] if like else 0.0
            vals = [_parse_scalar(x, proto) for x in items]
        return type(like)(vals)
    return _parse_scalar(text, like)


# ---------------------------------------------------------------- load / dump


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        cp[sec] = {}
        for f in dataclasses.fields(obj):
            if (sec, f.name) in _SKIP:
                continue
            cp[sec][f.name] = _format(getattr(obj, f.name))
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        lines += [f"{k} = {v}" for k, v in cp[sec].items()]
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    default = RunConfig()
    parts = {}
    for sec in SECTIONS:
        obj = getattr(default, sec)
        names = {f.name for f in dataclasses.fields(obj)}
        kw = {}
        if cp.has_section(sec):
            for key, raw in cp[sec].items():
                if key not in names or (sec, key) in _SKIP:
                    raise ConfigError(f"[{sec}] unknown key {key!r}")
                try:
                    kw[key] = _parse(raw, getattr(obj, key))
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"[{sec}] {key} = {raw!r}: {e}") from e
        try:
            parts[sec] = dataclasses.replace(obj, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{sec}] {e}") from e
    cfg = RunConfig(**parts, base_dir=base_dir)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return from_ini(path.read_text(), str(path.parent))


def validate(cfg: RunConfig) -> None:
    t = cfg.train
    if t.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if t.epochs < 0 or t.max_steps < 0:
        raise ConfigError("epochs and max_steps must be non-negative")
    if t.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.inference.topk < 1:
        raise ConfigError("topk must be >= 1")
    if cfg.decoder.num_classes != len(cfg.gen.classes):
        raise ConfigError(f"decoder.num_classes={cfg.decoder.num_classes} but the generator "
                          f"defines {len(cfg.gen.classes)} classes")
    if cfg.backbone.kind not in ("pillar", "voxel"):
        raise ConfigError(f"unknown backbone kind {cfg.backbone.kind!r}")
    if len(cfg.loss.code_weights) != 10:
        raise ConfigError("loss.code_weights needs 10 entries")
    try:
        mc = cfg.model_config()
        cell = mc.grid.pillar_size if cfg.backbone.kind == "pillar" else mc.grid.voxel_size
        X, Y = mc.grid.dims(cell)[:2]
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if X % 8 or Y % 8:
        raise ConfigError(f"BEV grid {X}x{Y} must be divisible by 8; adjust the cell size or range")


def model_hash(cfg: RunConfig) -> str:
    """Digest of everything that shapes the network; stored in checkpoints."""
    doc = dataclasses.asdict(cfg.model_config())
    blob = json.dumps(doc, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
