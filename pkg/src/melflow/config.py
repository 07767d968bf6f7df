"""Run configuration: a flat key=value text format with namespaced keys.

Sections: data.*, dcae.*, dit.*, train.*, sampler.*. Unknown keys are
rejected so a typo cannot silently fall back to a default. The rendered
text (``RunConfig.to_text``) is embedded verbatim in every checkpoint.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

LATENT_CHANNELS = 8  # fixed by the f8c8 compression geometry
SPATIAL_FACTOR = 8

# Context budgets shared by the denoiser and the encoders.
MAX_LYRIC_TOKENS = 4096
MAX_TEXT_TOKENS = 256
MAX_LATENT_TOKENS = 2584


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_songs: int = 64
    seed: int = 1234
    n_tags: int = 16
    n_speakers: int = 8
    instrumental_fraction: float = 0.25
    durations_s: str = "2.97,5.94"  # comma-separated song lengths, split evenly

    def duration_choices(self) -> tuple[float, ...]:
        vals = tuple(float(v) for v in self.durations_s.split(",") if v.strip())
        if not vals or any(v <= 0 for v in vals):
            raise ConfigError(f"data.durations_s must be positive: {self.durations_s!r}")
        return vals


@dataclass
class DcaeSection:
    n_bins: int = 128
    frame_rate_hz: float = 86.1328125  # 44100 / 512; latent rate = /8 ~ 10.77 Hz
    width: int = 8
    seed: int = 11
    train_steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-3
    weight_decay: float = 0.0
    crop_frames: int = 64  # fixed overfit windows; must divide 8


@dataclass
class DitSection:
    d_model: int = 128
    blocks: int = 8  # full-scale recipe: 24; tap index scales as ceil(blocks/3)
    heads: int = 4
    ffn_expansion: int = 2
    d_lyric: int = 128
    t_embed_dim: int = 128
    # sinusoidal absolute tables added to latent and lyric tokens; rotary q/k
    # phases inside self-attention only; cross-attention is content-addressed
    pos_encoding: str = "sin-abs+rotary-self"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: str = "self_attn,cross_attn"
    seed: int = 42


@dataclass
class TrainSection:
    lr: float = 1e-4
    warmup_steps: int = 200  # full-scale recipe: 4000
    weight_decay: float = 1e-2
    beta1: float = 0.8
    beta2: float = 0.9
    clip_norm: float = 0.5
    steps: int = 3000
    batch_size: int = 4
    phase: str = "pretrain"  # pretrain | finetune
    lambda_ssl: float = 1.0
    w_mert: float = 1.0
    w_hubert: float = 1.0  # finetune phase forces 0.01
    shift: float = 3.0
    seed: int = 7
    dropout_global: float = 0.15
    dropout_text: float = 0.15
    dropout_lyric: float = 0.15
    dropout_speaker: float = 0.50

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"train.phase must be pretrain|finetune, got {self.phase!r}")

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def effective_w_hubert(self) -> float:
        return 0.01 if self.phase == "finetune" else self.w_hubert

    def speaker_omitted(self) -> bool:
        return self.phase == "finetune"

    def phase_effects(self) -> dict:
        """The two behaviors the finetune phase flips, for introspection."""
        return {
            "w_hubert": self.effective_w_hubert(),
            "speaker_omitted": self.speaker_omitted(),
        }


@dataclass
class SamplerSection:
    steps: int = 30
    guidance_scale: float = 3.0
    shift: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler.steps must be >= 1")
        if self.guidance_scale < 0:
            raise ConfigError("sampler.guidance_scale must be >= 0")


_SECTIONS = {
    "data": DataSection,
    "dcae": DcaeSection,
    "dit": DitSection,
    "train": TrainSection,
    "sampler": SamplerSection,
}

# Comment column for serialized defaults that come from the full-scale recipe.
_ANNOTATIONS = {
    "dcae.frame_rate_hz": "44100 Hz / 512 hop; latent rate = /8",
    "dit.blocks": "full-scale recipe: 24",
    "dit.pos_encoding": "abs tables on latent+lyric tokens; rotary self-attn; cross-attn content-only",
    "train.lr": "full-scale recipe value",
    "train.warmup_steps": "full-scale recipe: 4000",
    "train.weight_decay": "full-scale recipe value",
    "train.beta1": "full-scale recipe value",
    "train.beta2": "full-scale recipe value",
    "train.clip_norm": "full-scale recipe value",
    "train.steps": "full-scale recipe: 460000 pretrain / 240000 finetune",
    "train.lambda_ssl": "full-scale recipe value",
    "train.w_hubert": "finetune recipe: 0.01",
    "train.shift": "full-scale recipe value",
    "train.dropout_global": "joint drop of all three signals",
    "train.dropout_speaker": "independent draw",
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    dcae: DcaeSection = field(default_factory=DcaeSection)
    dit: DitSection = field(default_factory=DitSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw_line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            section_fields = {f.name: f for f in fields(_SECTIONS[section])}
            if name not in section_fields:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if name in values[section]:
                raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
            values[section][name] = _coerce(value, section_fields[name].type, key)
        return cls(**{name: _SECTIONS[name](**values[name]) for name in _SECTIONS})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for section_name in _SECTIONS:
            section = getattr(self, section_name)
            for f in fields(section):
                key = f"{section_name}.{f.name}"
                value = getattr(section, f.name)
                line = f"{key} = {_render(value)}"
                note = _ANNOTATIONS.get(key)
                if note:
                    line = f"{line}  # {note}"
                lines.append(line)
            lines.append("")
        return "\n".join(lines)

    def replace(self, **updates) -> "RunConfig":
        """Return a copy with dotted-key overrides, e.g. replace(**{"train.steps": 10})."""
        cfg = RunConfig.from_text(self.to_text())
        for key, value in updates.items():
            section_name, _, name = key.partition(".")
            if section_name not in _SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            section = getattr(cfg, section_name)
            if not any(f.name == name for f in fields(section)):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, section_name, dataclasses.replace(section, **{name: value}))
        return cfg


def apply_string_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Dotted-key overrides with values given as strings, e.g. from a CLI."""
    parsed = {}
    for key, raw in overrides.items():
        section_name, _, name = key.partition(".")
        if section_name not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        section_fields = {f.name: f for f in fields(_SECTIONS[section_name])}
        if name not in section_fields:
            raise ConfigError(f"unknown config key {key!r}")
        parsed[key] = _coerce(str(raw), section_fields[name].type, key)
    return cfg.replace(**parsed)


def _coerce(value: str, field_type, key: str):
    type_name = field_type if isinstance(field_type, str) else field_type.__name__
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        if type_name == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {type_name})") from exc


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
