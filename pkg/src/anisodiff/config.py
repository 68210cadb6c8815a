"""Run configuration: flat ``key = value`` files with dotted section keys.

Example::

    # sampling
    sampling.w = 2.0
    sampling.patch = 496, 496, 16
    training.model = tiny
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .conditioning import CfgConfig
from .denoiser import TrainConfig, UNetConfig
from .phantom import LesionSpec, PhantomSpec
from .sampler import SamplingPlan
from .schedule import build_scaled_linear


class ConfigError(ValueError):
    pass


# (enface_active, w) per ablation mode
MODES = {
    "ddim": (False, 0.0),
    "ddim-ef-nocfg": (True, 1.0),
    "ddim-ef": (True, 2.0),
}


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 0.0005
    beta_end: float = 0.0195


@dataclass
class SamplingSection:
    ddim_steps: int = 100
    patch: tuple[int, int, int] = (496, 496, 16)
    overlap: tuple[float, float, float] = (0.25, 0.25, 0.50)
    w: float | None = None  # None: taken from the mode table
    mode: str = "ddim-ef"
    seed: int = 0
    register_max_shift: int = 32


@dataclass
class TrainingSection:
    lr: float = 5e-5
    batch: int = 16
    epochs: int = 10
    steps_per_epoch: int = 0  # 0: one crop per training volume per epoch
    crop: tuple[int, int, int] = (128, 128, 16)
    p_uncond: float = 0.1
    seed: int = 0
    model: str = "tiny"


@dataclass
class SynthSection:
    n: int = 1
    dims: tuple[int, int, int] = (128, 64, 240)
    n_drusen: int = 3
    n_vessels: int = 2
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass
class QuantifySection:
    reconstructor: str = "tricubic"
    dims: tuple[int, int, int] = (64, 64, 64)
    base_spacing_mm: tuple[float, float, float] = (0.05, 0.05, 0.05)
    center_mm: tuple[float, float, float] = (1.6, 1.6, 1.6)
    semi_axes_mm: tuple[float, float, float] = (0.8, 0.6, 0.25)
    factors: tuple[int, ...] = (1, 2, 4, 8)


@dataclass
class PathsSection:
    out: str = "."


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    synth: SynthSection = field(default_factory=SynthSection)
    quantify: QuantifySection = field(default_factory=QuantifySection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- derived module objects; each raises on invalid values -----------

    def build_schedule(self):
        return build_scaled_linear(self.schedule.T, self.schedule.beta_start, self.schedule.beta_end)

    def mode(self) -> tuple[bool, float]:
        if self.sampling.mode not in MODES:
            raise ConfigError(f"unknown mode {self.sampling.mode!r}; choose from {sorted(MODES)}")
        active, w = MODES[self.sampling.mode]
        return active, (w if self.sampling.w is None else self.sampling.w)

    def sampling_plan(self) -> SamplingPlan:
        active, w = self.mode()
        sp = self.sampling
        return SamplingPlan(
            patch_size=tuple(sp.patch),
            overlap_fraction=tuple(sp.overlap),
            ddim_steps=sp.ddim_steps,
            guidance_scale=w,
            seed=sp.seed,
            enface_active=active,
            register_max_shift=sp.register_max_shift,
        )

    def unet_config(self) -> UNetConfig:
        tr = self.training
        if tr.model == "tiny":
            return replace(UNetConfig.tiny(), crop=tuple(tr.crop))
        if tr.model == "paper":
            return replace(UNetConfig.paper(), crop=tuple(tr.crop))
        raise ConfigError(f"unknown model {tr.model!r}; choose tiny or paper")

    def train_config(self) -> TrainConfig:
        tr = self.training
        return TrainConfig(
            learning_rate=tr.lr,
            batch_size=tr.batch,
            epochs=tr.epochs,
            steps_per_epoch=tr.steps_per_epoch or None,
            crop_size=tuple(tr.crop),
            seed=tr.seed,
        )

    def cfg_config(self) -> CfgConfig:
        _, w = self.mode()
        return CfgConfig(w=w, p_uncond=self.training.p_uncond)

    def phantom_spec(self, index: int = 0) -> PhantomSpec:
        sy = self.synth
        return PhantomSpec(
            dims=tuple(sy.dims),
            n_drusen=sy.n_drusen,
            n_vessels=sy.n_vessels,
            noise_sigma=sy.noise_sigma,
            seed=sy.seed + index,
        )

    def lesion(self) -> LesionSpec:
        q = self.quantify
        return LesionSpec(tuple(q.center_mm), tuple(q.semi_axes_mm))

    def validate(self) -> None:
        """Build every module object once so invalid values fail before any work."""
        try:
            self.build_schedule()
            self.sampling_plan()
            self.unet_config()
            self.train_config()
            self.cfg_config()
            self.phantom_spec()
            if self.synth.n < 0:
                raise ConfigError("synth.n must be >= 0")
            if self.quantify.reconstructor not in ("nearest", "linear", "tricubic"):
                raise ConfigError(f"unknown reconstructor {self.quantify.reconstructor!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e

    def set(self, key: str, raw: str) -> None:
        try:
            section_name, name = key.strip().split(".", 1)
            section = getattr(self, section_name)
        except (ValueError, AttributeError):
            raise ConfigError(f"unknown config key {key!r}") from None
        types = {f.name: f.type for f in fields(section)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, name, _coerce(raw.strip(), types[name], key))

    def flat(self) -> dict[str, Any]:
        out = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out


def _coerce(raw: str, typ: str, key: str):
    try:
        if raw.lower() in ("none", "") and "None" in typ:
            return None
        if typ.startswith("tuple"):
            elem = float if "float" in typ else int
            return tuple(elem(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        cfg.set(key, value)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        parse_config_text(text, cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg
