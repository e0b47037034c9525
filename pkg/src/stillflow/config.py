"""Run configuration: one JSON document with sections data, compressor, udit, flow, adapters, train, eval.

Defaults are the full-size model settings. ``preset("desk")`` shrinks the
models and step counts so the whole pipeline runs on a laptop CPU in minutes.
Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adapters import AdapterConfig
from .compressor import CompressorConfig
from .datasetgen import DataConfig
from .errors import ConfigError, IngestionError
from .flow import FlowPathConfig, SolverConfig
from .udit import UditConfig


@dataclass
class FlowSection:
    sigma_min: float = 1e-4
    steps: int = 50
    scheme: str = "euler"

    def __post_init__(self):
        FlowPathConfig(self.sigma_min)
        SolverConfig(self.steps, self.scheme)

    @property
    def path(self) -> FlowPathConfig:
        return FlowPathConfig(self.sigma_min)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.steps, self.scheme)


@dataclass
class TrainSection:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    segment_s: float = 2.0
    vae_steps: int = 100000
    flow_steps: int = 100000
    adapt_steps: int = 10000
    vae_lr: float | None = None
    vae_batch_size: int | None = None
    vae_segment_s: float | None = None
    flow_lr: float | None = None
    checkpoint_every: int = 1000
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.batch_size < 1 or self.segment_s <= 0:
            raise ConfigError("lr, batch_size and segment_s must be positive")
        if min(self.vae_steps, self.flow_steps, self.adapt_steps) < 0 or self.checkpoint_every < 1:
            raise ConfigError("step counts must be nonnegative and checkpoint_every positive")


@dataclass
class EvalSection:
    rtf_repeats: int = 3
    metrics: list[str] = field(default_factory=lambda: ["lsd", "si_sdr"])
    external_scorer: list[str] | None = None


SECTIONS = {
    "data": DataConfig,
    "compressor": CompressorConfig,
    "udit": UditConfig,
    "flow": FlowSection,
    "adapters": AdapterConfig,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    udit: UditConfig = field(default_factory=UditConfig)
    flow: FlowSection = field(default_factory=FlowSection)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.compressor.latent_dim != self.udit.latent_dim:
            raise ConfigError(f"compressor latent_dim {self.compressor.latent_dim} != "
                              f"udit latent_dim {self.udit.latent_dim}")
        if self.compressor.sample_rate != self.data.sample_rate:
            raise ConfigError("compressor and data sample rates differ")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``doc`` on ``base`` (defaults when omitted)."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        merged = (base or cls()).to_dict()
        for name, values in doc.items():
            if not isinstance(values, dict):
                raise ConfigError(f"section '{name}' must be an object")
            allowed = {f.name for f in dataclasses.fields(SECTIONS[name])}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(bad))}")
            merged[name].update(values)
        try:
            return cls(**{name: SECTIONS[name](**merged[name]) for name in SECTIONS})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(doc, base)


DESK_OVERRIDES = {
    "data": {"scenes_per_split": [6, 2, 2], "mixtures_per_scene": 8, "mixture_s": 2.0,
             "speakers_per_mixture": 1, "music_prob": 0.3, "snr_db": [0.0, 10.0]},
    "compressor": {"latent_dim": 32, "blocks": 1, "embed_dim": 16, "lstm_hidden": 16, "attn_heads": 2,
                   "attn_qk_channels": 8, "kl_weight": 1e-4},
    "udit": {"latent_dim": 32, "layers": 4, "embed_dim": 64, "heads": 4, "max_len": 256,
             "freq_embed_dim": 64},
    "train": {"lr": 3e-3, "batch_size": 16, "segment_s": 1.0, "vae_batch_size": 4, "vae_segment_s": 0.5,
              "vae_steps": 600, "flow_steps": 300, "adapt_steps": 50, "checkpoint_every": 100,
              "weight_decay": 0.0},
}


def preset(name: str) -> RunConfig:
    if name == "paper":
        return RunConfig()
    if name == "desk":
        return RunConfig.from_dict(copy.deepcopy(DESK_OVERRIDES))
    raise ConfigError(f"unknown preset '{name}' (choose desk or paper)")
