# =====================================================
# utils/config.py
# =====================================================

import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, is_dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from utils.errors import InvalidInputError

logger = logging.getLogger(__name__)

# Environment overrides
REPORT_DIR = os.getenv("DI2W_REPORT_DIR", "runs")
LOG_LEVEL = os.getenv("DI2W_LOG_LEVEL", "INFO")

CROP_FILTERS = ("complementary", "relevant", "off")
TARGET_FILTERS = ("relevant", "irrelevant", "off")
CROP_MODES = ("crop", "mask")
ACTIVATIONS = ("gelu", "tanh", "identity")
ALIGN_TARGETS = ("reference", "target")
PRECISIONS = ("float64", "float32")
TASK_KINDS = ("object_composition", "domain_conversion", "sentence_manipulation")


@dataclass
class EncoderConfig:
    """
    Frozen toy encoder settings. ``token_dim`` and ``concept_dim`` default to ``d``.

    Vocabulary rows sit at ``token_scale`` times image-embedding scale and the
    text head divides that back out, so a pseudo token of image scale outweighs
    the words around it until the mapping learns to shrink it.
    """
    d: int = 768
    token_dim: Optional[int] = None
    concept_dim: Optional[int] = None
    seed: int = 0
    noise_sigma: float = 0.0
    text_gain: float = 0.05
    text_perturbation: float = 0.02
    function_word_scale: float = 0.1
    token_scale: float = 0.004
    max_prompt_length: int = 77

    @property
    def resolved_token_dim(self) -> int:
        return self.token_dim or self.d

    @property
    def resolved_concept_dim(self) -> int:
        return self.concept_dim or self.d

    def validate(self):
        if self.d < 1 or self.resolved_token_dim < 1 or self.resolved_concept_dim < 1:
            raise InvalidInputError("encoder dimensions must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidInputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.text_gain <= 0:
            raise InvalidInputError(f"text_gain must be > 0, got {self.text_gain}")
        if self.token_scale <= 0:
            raise InvalidInputError(f"token_scale must be > 0, got {self.token_scale}")
        if self.max_prompt_length < 4:
            raise InvalidInputError("max_prompt_length must hold at least 'a photo of [*]'")


@dataclass
class PTCConfig:
    """Pseudo triplet construction: crop geometry, filtering and reference mining."""
    crop_min: int = 32
    crop_max: int = 64
    center_exclusion: bool = True
    p_other_crop: float = 0.25
    p_other_original: float = 0.10
    crop_filter: str = "complementary"
    target_filter: str = "relevant"
    use_crops: bool = True
    use_mining: bool = True
    cosine_everywhere: bool = False
    crop_mode: str = "crop"
    max_crop_attempts: int = 10000

    def validate(self):
        if self.crop_min < 1 or self.crop_max < self.crop_min:
            raise InvalidInputError(f"invalid crop range {self.crop_min}-{self.crop_max}")
        for name in ("p_other_crop", "p_other_original"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
        if self.p_other_crop + self.p_other_original > 1.0:
            raise InvalidInputError("mixture probabilities sum above 1")
        if self.crop_filter not in CROP_FILTERS:
            raise InvalidInputError(f"crop_filter must be one of {CROP_FILTERS}")
        if self.target_filter not in TARGET_FILTERS:
            raise InvalidInputError(f"target_filter must be one of {TARGET_FILTERS}")
        if self.crop_mode not in CROP_MODES:
            raise InvalidInputError(f"crop_mode must be one of {CROP_MODES}")
        if not (self.use_crops or self.use_mining):
            raise InvalidInputError("use_crops and use_mining cannot both be off")


@dataclass
class MappingConfig:
    hidden_dim: Optional[int] = None
    activation: str = "gelu"

    def validate(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {ACTIVATIONS}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise InvalidInputError("hidden_dim must be >= 1")


@dataclass
class LossConfig:
    tau: float = 100.0
    use_compose: bool = True
    use_align: bool = True
    align_target: str = "reference"
    connective: str = ","

    def validate(self):
        if self.tau <= 0:
            raise InvalidInputError(f"tau must be > 0, got {self.tau}")
        if self.align_target not in ALIGN_TARGETS:
            raise InvalidInputError(f"align_target must be one of {ALIGN_TARGETS}")
        if not (self.use_compose or self.use_align):
            raise InvalidInputError("at least one of the compose/align losses must be on")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.1
    warmup_steps: int = 100
    batch_size: int = 64
    total_steps: int = 1000
    seed: int = 0
    precision: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    max_skipped_steps: int = 50
    log_every: int = 10
    ptc: PTCConfig = field(default_factory=PTCConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)

    def validate(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidInputError("learning_rate must be > 0 and weight_decay >= 0")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise InvalidInputError("step counts must be >= 0")
        if self.batch_size < 2:
            raise InvalidInputError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.precision not in PRECISIONS:
            raise InvalidInputError(f"precision must be one of {PRECISIONS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidInputError("invalid AdamW moment parameters")
        self.ptc.validate()
        self.loss.validate()
        self.mapping.validate()

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class WorldConfig:
    concept_count: int = 64
    style_count: int = 4
    image_count: int = 2000
    image_size: int = 224
    grid: int = 4
    concepts_per_image: Tuple[int, int] = (2, 4)
    coverage: float = 0.6
    noise_sigma: float = 0.0
    style_scale: float = 0.5
    variant_fraction: float = 0.3
    crops_per_image: int = 4
    seed: int = 0

    def validate(self):
        if min(self.concept_count, self.style_count, self.image_count, self.grid) < 1:
            raise InvalidInputError("world counts must be >= 1")
        lo, hi = self.concepts_per_image
        if lo < 1 or hi < lo:
            raise InvalidInputError(f"invalid concepts_per_image {self.concepts_per_image}")
        if not 0.0 < self.coverage <= 1.0:
            raise InvalidInputError(f"coverage must lie in (0, 1], got {self.coverage}")
        if self.noise_sigma < 0 or self.style_scale < 0:
            raise InvalidInputError("noise_sigma and style_scale must be >= 0")
        if not 0.0 <= self.variant_fraction < 1.0:
            raise InvalidInputError("variant_fraction must lie in [0, 1)")
        if self.crops_per_image < 1:
            raise InvalidInputError("crops_per_image must be >= 1")


@dataclass
class EvalConfig:
    ks: Tuple[int, ...] = (1, 5, 10, 50)
    max_queries: int = 500
    seed: int = 0
    kinds: Tuple[str, ...] = TASK_KINDS

    def validate(self):
        if not self.ks or min(self.ks) < 1:
            raise InvalidInputError("every K must be >= 1")
        unknown = [k for k in self.kinds if k not in TASK_KINDS]
        if unknown:
            raise InvalidInputError(f"unknown task kinds {unknown}")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Named, reproducible random stream derived from the run seed.

    Args:
        seed: Run seed (the single ``--seed`` flag)
        name: Stream name, e.g. ``"crop"`` or ``"batch"``
        keys: Extra non-negative integers (step, epoch, ...)

    Returns:
        numpy Generator independent of every other (name, keys) pair
    """
    entropy = [int(seed), zlib.crc32(name.encode("utf-8"))] + [int(k) for k in keys]
    return np.random.default_rng(entropy)


def config_to_dict(config: Any) -> Dict[str, Any]:
    if is_dataclass(config):
        return asdict(config)
    return dict(config)


def config_hash(*configs: Any) -> str:
    """SHA-256 over the sorted-key JSON of one or more config dataclasses."""
    payload = [config_to_dict(c) for c in configs]
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def train_config_from_dict(data: Dict[str, Any]) -> TrainConfig:
    """Rebuild a TrainConfig (with nested sections) from ``config_to_dict`` output."""
    data = dict(data)
    ptc = PTCConfig(**data.pop("ptc", {}))
    loss = LossConfig(**data.pop("loss", {}))
    mapping = MappingConfig(**data.pop("mapping", {}))
    return TrainConfig(ptc=ptc, loss=loss, mapping=mapping, **data)
