"""Run configuration: shipped profiles, file loading, and content digests.

A run is described by one declarative config with sections for the model,
raster geometry, text handling, loss weights, optimizer, and the synthetic
corpus. Artifacts are stamped with digests so mismatched combinations are
refused instead of silently mixed:

- ``data_digest``   covers raster geometry + synthetic corpus settings
- ``model_digest``  covers everything that fixes parameter shapes
- ``train_digest``  adds loss weights and optimizer settings (resume safety)
- ``digest``        hash of the fully resolved config (provenance)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

CONFIG_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2
    text_layers: int = 2
    mlp_ratio: int = 4
    dropout: float = 0.1
    cross_heads: int = 4
    rn_hidden: int = 16
    rn_dropout: float = 0.5
    share_cross_weights: bool = True
    cross_init_std: float = 0.125
    cross_tie_qk: bool = True
    inference_direction: str = "both"  # "both" | "sketch_to_image"


@dataclass(frozen=True)
class DataConfig:
    input_size: int = 32
    channels: int = 3
    patch: int = 8
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    conv_strides: tuple[int, ...] = (2, 2, 2, 1)
    conv_kernel: int = 3


@dataclass(frozen=True)
class TextConfig:
    k_sentences: int = 5
    max_text_len: int = 64
    template_id: int = 4


@dataclass(frozen=True)
class LossWeights:
    lambda_tri: float = 0.5
    lambda_rn: float = 8.0
    margin: float = 0.3

    def __post_init__(self):
        if self.lambda_tri < 0 or self.lambda_rn < 0 or self.margin < 0:
            raise ValueError("loss weights and margin must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    triplets: int = 16
    epochs: int = 200
    seed: int = 7
    eval_every: int = 0  # epochs between seen-test evals; 0 disables
    text_free: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.triplets < 1:
            raise ValueError(f"need at least one triplet per batch, got {self.triplets}")


@dataclass(frozen=True)
class SyntheticConfig:
    categories: int = 6
    seen: int = 4
    per_category: int = 20
    render_size: int = 64
    seed: int = 7


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    text: TextConfig = field(default_factory=TextConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        raw = dict(raw)
        raw.pop("version", None)
        sections = {
            "model": ModelConfig, "data": DataConfig, "text": TextConfig,
            "loss": LossWeights, "train": TrainConfig, "synthetic": SyntheticConfig,
        }
        unknown = set(raw) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, cls in sections.items():
            body = dict(raw.get(name, {}))
            for key, val in body.items():
                if isinstance(val, list):
                    body[key] = tuple(val)
            kwargs[name] = cls(**body)
        return RunConfig(**kwargs)

    @staticmethod
    def profile(name: str) -> "RunConfig":
        ref = resources.files("sketchalign").joinpath(f"profiles/{name}.json")
        try:
            raw = json.loads(ref.read_text())
        except FileNotFoundError:
            raise KeyError(f"no such profile: {name!r} (shipped: desk, paper)") from None
        return RunConfig.from_dict(raw)

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def override(self, **section_updates) -> "RunConfig":
        """Return a copy with per-section field updates, e.g. train={'seed': 3}."""
        out = self
        for section, updates in section_updates.items():
            out = replace(out, **{section: replace(getattr(out, section), **updates)})
        return out

    # -- digests ------------------------------------------------------------

    @property
    def digest(self) -> str:
        return _digest(self.to_dict())

    @property
    def data_digest(self) -> str:
        return _digest({"data": asdict(self.data), "synthetic": asdict(self.synthetic)})

    @property
    def model_digest(self) -> str:
        return _digest({
            "model": asdict(self.model),
            "geometry": asdict(self.data),
            "max_text_len": self.text.max_text_len,
        })

    @property
    def train_digest(self) -> str:
        t = self.train
        return _digest({
            "model": self.model_digest,
            "loss": asdict(self.loss),
            "opt": {"lr": t.lr, "weight_decay": t.weight_decay, "beta1": t.beta1,
                    "beta2": t.beta2, "eps": t.eps, "triplets": t.triplets,
                    "text_free": t.text_free},
            "text": {"k_sentences": self.text.k_sentences,
                     "template_id": self.text.template_id},
        })


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
