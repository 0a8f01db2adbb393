"""Typed run configuration with strict file loading.

A run is described by one flat file with sections.  TOML is the input format;
the pipeline snapshots the parsed config back out as JSON so a finished output
directory is self-describing.  Unknown keys anywhere are errors: a typo in a
hyperparameter name must fail loudly, not silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .dino import DinoHyper, EncoderConfig
from .errors import InvalidConfig
from .synthworld import WorldConfig

try:
    import tomllib
except ModuleNotFoundError:          # 3.10 fallback
    import tomli as tomllib

CONFIG_VERSION = 1

MODALITY_MODES = ("audio_only", "audio_visual")
SELECTION_MODES = ("none", "fixed", "dlg", "dlg_lc")


@dataclass(frozen=True)
class Stage2Hyper:
    """Training loop settings for one pseudo-label iteration."""

    epochs: int = 12
    batch_size: int = 64
    lr_start: float = 0.05
    lr_end: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warm_start: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig("stage2 epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("stage2 batch_size must be >= 1")
        if self.lr_start <= 0.0 or self.lr_end <= 0.0:
            raise InvalidConfig("stage2 learning rates must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig("stage2 momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise InvalidConfig("stage2 weight_decay must be >= 0")


@dataclass(frozen=True)
class GateDefaults:
    """Gate thresholds as configured (the loss threshold itself is learned)."""

    tau2: float = 0.5
    sharpen_temp: float = 0.1
    fixed_tau: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.tau2 < 1.0:
            raise InvalidConfig("tau2 must be in (0, 1)")
        if self.sharpen_temp <= 0.0:
            raise InvalidConfig("sharpen_temp must be > 0")


@dataclass(frozen=True)
class AamDefaults:
    """Margin-softmax head settings (the weight matrix lives elsewhere)."""

    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0.0:
            raise InvalidConfig("aam scale must be > 0")
        if not 0.0 <= self.margin < 1.5707963267948966:
            raise InvalidConfig("aam margin must be in [0, pi/2)")


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs, minus the output directory."""

    world: WorldConfig = field(default_factory=WorldConfig)
    encoder_audio: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(input_dim=32))
    encoder_visual: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(input_dim=24))
    dino: DinoHyper = field(default_factory=DinoHyper)
    stage2: Stage2Hyper = field(default_factory=Stage2Hyper)
    gate: GateDefaults = field(default_factory=GateDefaults)
    aam: AamDefaults = field(default_factory=AamDefaults)
    num_iterations: int = 3
    num_clusters: int = 20
    modality_mode: str = "audio_only"
    selection_mode: str = "dlg_lc"
    label_noise_rate: float = 0.0
    num_target_trials: int = 1000
    num_nontarget_trials: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.num_iterations < 0:
            raise InvalidConfig("num_iterations must be >= 0")
        if self.num_clusters < 2:
            raise InvalidConfig("num_clusters must be >= 2")
        if self.modality_mode not in MODALITY_MODES:
            raise InvalidConfig(
                f"modality_mode must be one of {MODALITY_MODES}, "
                f"got {self.modality_mode!r}")
        if self.selection_mode not in SELECTION_MODES:
            raise InvalidConfig(
                f"selection_mode must be one of {SELECTION_MODES}, "
                f"got {self.selection_mode!r}")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise InvalidConfig("label_noise_rate must be in [0, 1)")
        if self.num_target_trials < 1 or self.num_nontarget_trials < 1:
            raise InvalidConfig("trial counts must be >= 1")
        if self.encoder_audio.input_dim != self.world.obs_dim_audio:
            raise InvalidConfig(
                "encoder_audio.input_dim must equal world.obs_dim_audio")
        if self.encoder_visual.input_dim != self.world.obs_dim_visual:
            raise InvalidConfig(
                "encoder_visual.input_dim must equal world.obs_dim_visual")


_SECTIONS = {
    "world": WorldConfig,
    "encoder_audio": EncoderConfig,
    "encoder_visual": EncoderConfig,
    "dino": DinoHyper,
    "stage2": Stage2Hyper,
    "gate": GateDefaults,
    "aam": AamDefaults,
}

_TOP_KEYS = {
    "version", "num_iterations", "num_clusters", "modality_mode",
    "selection_mode", "label_noise_rate", "num_target_trials",
    "num_nontarget_trials", "seed",
}


def _build_section(name: str, cls, raw: dict, world: WorldConfig):
    if not isinstance(raw, dict):
        raise InvalidConfig(f"section [{name}] must be a table")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise InvalidConfig(f"unknown keys in [{name}]: {sorted(unknown)}")
    kwargs = dict(raw)
    if "hidden_dims" in kwargs:
        kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
    if cls is EncoderConfig:
        derived = (world.obs_dim_audio if name == "encoder_audio"
                   else world.obs_dim_visual)
        kwargs.setdefault("input_dim", derived)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"bad value in [{name}]: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    """Build a validated RunConfig from a parsed document.

    Every key must be recognized; sections may be omitted entirely, in which
    case their defaults apply.
    """
    if not isinstance(doc, dict):
        raise InvalidConfig("config root must be a table")
    unknown = set(doc) - _TOP_KEYS - set(_SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown top-level keys: {sorted(unknown)}")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise InvalidConfig(
            f"unsupported config version: {doc.get('version')}")

    world = _build_section("world", WorldConfig, doc.get("world", {}), None)
    parts = {"world": world}
    for name, cls in _SECTIONS.items():
        if name == "world":
            continue
        parts[name] = _build_section(name, cls, doc.get(name, {}), world)

    top = {k: doc[k] for k in doc if k in _TOP_KEYS and k != "version"}
    try:
        return RunConfig(**parts, **top)
    except TypeError as exc:
        raise InvalidConfig(f"bad top-level value: {exc}") from exc


def load_run_config(path) -> RunConfig:
    """Parse a config file (TOML, or a JSON snapshot) into a RunConfig."""
    text_path = str(path)
    if text_path.endswith(".json"):
        with open(text_path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"malformed JSON config: {exc}") from exc
    else:
        with open(text_path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise InvalidConfig(f"malformed TOML config: {exc}") from exc
    return run_config_from_dict(doc)


def run_config_to_dict(config: RunConfig) -> dict:
    """Plain-dict form used for snapshots and hashing."""
    doc = {"version": CONFIG_VERSION}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(config, name))
        if "hidden_dims" in section:
            section["hidden_dims"] = list(section["hidden_dims"])
        doc[name] = section
    for key in sorted(_TOP_KEYS - {"version"}):
        doc[key] = getattr(config, key)
    return doc


def save_config_snapshot(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(config: RunConfig) -> str:
    """Twelve hex chars identifying the config contents."""
    blob = json.dumps(run_config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
