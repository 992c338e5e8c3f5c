"""Run configuration: sectioned ``key = value`` text files mapped onto dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

DEFAULT_TIME_STEPS = (5, 10, 20)
DEFAULT_ALPHA = 1.5
DEFAULT_BETA = 0.5

TASKS = ("mri-ct", "mri-pet", "mri-spect")


@dataclass(frozen=True)
class DataConfig:
    resolution: int = 64
    tasks: tuple[str, ...] = TASKS
    train_pairs_per_task: int = 30
    test_pairs_per_task: int = 50
    root: str = "data"


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 16
    multipliers: tuple[int, ...] = (1, 2, 2, 4, 4)
    amff_groups: int = 4
    ca_reduction: int = 4
    sa_kernel: int = 7


@dataclass(frozen=True)
class FusionSection:
    time_steps: tuple[int, ...] = DEFAULT_TIME_STEPS
    use_amff: bool = True
    use_msff: bool = True
    # False disables both the noising of inputs and the noisy-feature fusion block
    diffusion: bool = True


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    # weight of the gradient term; 1 everywhere except the loss-ablation rows
    gamma: float = 1.0
    patch_size: int = 16
    stride: int = 16


@dataclass(frozen=True)
class StageConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    # cosine decay of the learning rate to zero over the run
    cosine: bool = False
    log_every: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"


@dataclass(frozen=True)
class FusionConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionSection = field(default_factory=FusionSection)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(steps=2000, batch_size=8))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(steps=1000, batch_size=4, lr=3e-3,
                                                                      cosine=True))
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        validate(self)

    # convenience accessors used throughout the package
    @property
    def resolution(self) -> int:
        return self.data.resolution

    @property
    def time_steps(self) -> tuple[int, ...]:
        return self.fusion.time_steps

    def replace(self, **sections) -> "FusionConfig":
        """``cfg.replace(loss={"alpha": 1.0})`` -> new config with updated section fields."""
        updates = {}
        for name, values in sections.items():
            current = getattr(self, name)
            updates[name] = dataclasses.replace(current, **values) if isinstance(values, dict) else values
        return dataclasses.replace(self, **updates)


def validate(cfg: FusionConfig) -> None:
    # the coarsest feature level is resolution/16 and needs at least 2x2 for normalization
    if cfg.data.resolution < 32 or cfg.data.resolution % 16:
        raise ValueError(f"resolution must be a multiple of 16 and at least 32, got {cfg.data.resolution}")
    for task in cfg.data.tasks:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if cfg.loss.alpha < 0 or cfg.loss.beta < 0 or cfg.loss.gamma < 0:
        raise ValueError("loss weights must be >= 0")
    if cfg.loss.patch_size > cfg.data.resolution:
        raise ValueError("loss patch size exceeds resolution")
    steps = cfg.fusion.time_steps
    if not steps or any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"time steps must be non-empty and strictly increasing, got {steps}")
    if steps[0] < 0 or steps[-1] > cfg.schedule.T:
        raise ValueError(f"time steps must lie in [0, {cfg.schedule.T}]")
    if cfg.model.base_width <= 0 or any(m <= 0 for m in cfg.model.multipliers):
        raise ValueError("channel widths must be positive")
    if len(cfg.model.multipliers) != 5:
        raise ValueError("exactly five scale multipliers are required")
    for stage in (cfg.stage1, cfg.stage2):
        if stage.steps < 0 or stage.batch_size < 1 or stage.lr <= 0:
            raise ValueError(f"invalid optimiser settings {stage}")


# ----------------------------
# text (de)serialisation
# ----------------------------
def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, typ) -> Any:
    raw = raw.strip()
    if get_origin(typ) is tuple:
        (inner, *_) = get_args(typ)
        return tuple(_parse(p, inner) for p in raw.split(",") if p.strip())
    if typ is bool:
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)


def to_text(cfg: FusionConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for sec in dataclasses.fields(cfg):
        section = getattr(cfg, sec.name)
        parser[sec.name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_text(text: str) -> FusionConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    defaults = FusionConfig()
    sections = {}
    for sec in dataclasses.fields(FusionConfig):
        current = getattr(defaults, sec.name)
        if not parser.has_section(sec.name):
            sections[sec.name] = current
            continue
        hints = get_type_hints(type(current))
        known = {f.name for f in dataclasses.fields(current)}
        unknown = set(parser[sec.name]) - known
        if unknown:
            raise ValueError(f"unknown keys in [{sec.name}]: {sorted(unknown)}")
        values = {k: _parse(v, hints[k]) for k, v in parser[sec.name].items()}
        sections[sec.name] = dataclasses.replace(current, **values)
    unknown_sections = set(parser.sections()) - {f.name for f in dataclasses.fields(FusionConfig)}
    if unknown_sections:
        raise ValueError(f"unknown config sections: {sorted(unknown_sections)}")
    return FusionConfig(**sections)


def load(path) -> FusionConfig:
    return from_text(Path(path).read_text(encoding="utf-8"))


def save(cfg: FusionConfig, path) -> None:
    Path(path).write_text(to_text(cfg), encoding="utf-8")


def _digest_of(*parts: Any) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode())
    return h.hexdigest()[:16]


def portable(cfg: FusionConfig) -> FusionConfig:
    """The config with the output location blanked: where results go is not part of their identity."""
    return cfg.replace(run={"out_dir": ""})


def digest(cfg: FusionConfig) -> str:
    return hashlib.sha256(to_text(portable(cfg)).encode()).hexdigest()[:16]


def reconstructor_digest(cfg: FusionConfig) -> str:
    """Identifies the Stage I architecture; checkpoints refuse to load across digests."""
    return _digest_of("recon", dataclasses.astuple(cfg.model)[:2], cfg.data.resolution)


def fusion_digest(cfg: FusionConfig) -> str:
    return _digest_of("fusion", dataclasses.astuple(cfg.model), dataclasses.astuple(cfg.fusion),
                      reconstructor_digest(cfg))
