from dataclasses import dataclass, field, asdict, replace
from typing import List, Optional, Dict, Any, Tuple
from enum import Enum
import math

import numpy as np


class AlignCapError(Exception):
    """Base class for every error raised by the AlignCap stack."""
    pass

class BoxValidationError(AlignCapError):
    """A bounding box is outside [0,1] or has non-positive extent."""
    pass

class PreconditionError(AlignCapError):
    """An operation was called with inputs its contract forbids."""
    pass

class ConfigError(AlignCapError):
    """Invalid configuration value."""
    pass


class DiscrepancyMode(Enum):
    FEATURE_COSINE = "feature-cosine"
    ONE_MINUS_IOU = "one-minus-iou"

class TagSubclass(Enum):
    ENTITY = "entity"
    ATTRIBUTE = "attribute"
    ACTION = "action"
    SCENE = "scene"

class ConditionedKind(Enum):
    TAGGING = "image-conditioned-tagging"
    CAPTION = "image-conditioned-caption"


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise BoxValidationError(f"Box has non-finite coordinates: {coords}")
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise BoxValidationError(f"Box coordinates must lie in [0,1], got {coords}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise BoxValidationError(f"Box must satisfy x0 < x1 and y0 < y1, got {coords}")

    @classmethod
    def from_list(cls, values) -> "BBox":
        if len(values) != 4:
            raise BoxValidationError(f"Box needs 4 coordinates, got {len(values)}: {values}")
        return cls(*(float(v) for v in values))

    @classmethod
    def parse(cls, text: str) -> "BBox":
        """Parses "x0,y0,x1,y1"."""
        try:
            values = [float(p) for p in text.split(',')]
        except ValueError as e:
            raise BoxValidationError(f"Cannot parse box '{text}': {e}") from e
        return cls.from_list(values)

    def to_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, other: "BBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and self.x1 >= other.x1 and self.y1 >= other.y1)

FULL_IMAGE = BBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class Detection:
    class_name: str
    bbox: BBox
    score: float = 1.0

    def __post_init__(self):
        if not self.class_name:
            raise PreconditionError("Detection class_name must be non-empty")
        if not (0.0 <= self.score <= 1.0):
            raise PreconditionError(f"Detection score must lie in [0,1], got {self.score}")

    def to_dict(self) -> Dict[str, Any]:
        return {"class": self.class_name, "bbox": self.bbox.to_list(), "score": self.score}


@dataclass(frozen=True)
class CandidateView:
    bbox: BBox
    source_class: str
    is_target: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {"bbox": self.bbox.to_list(), "source_class": self.source_class, "is_target": self.is_target}


@dataclass(frozen=True)
class GodConfig:
    k: int = 2
    j: int = 3
    discrepancy_mode: DiscrepancyMode = DiscrepancyMode.FEATURE_COSINE
    enabled: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise PreconditionError(f"GodConfig.k must be >= 1, got {self.k}")
        if self.j < 2:
            raise PreconditionError(f"GodConfig.j must be >= 2, got {self.j}")


@dataclass(frozen=True)
class TagVocabulary:
    tags: Tuple[str, ...]
    subclasses: Tuple[TagSubclass, ...]

    def __post_init__(self):
        if not self.tags:
            raise PreconditionError("TagVocabulary must be non-empty")
        if len(set(self.tags)) != len(self.tags):
            raise PreconditionError("TagVocabulary tags must be unique")
        if len(self.subclasses) != len(self.tags):
            raise PreconditionError("Every tag needs exactly one subclass")

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)

    def of_subclass(self, subclass: TagSubclass) -> List[str]:
        return [t for t, s in zip(self.tags, self.subclasses) if s == subclass]

    def subclass_of(self, tag: str) -> TagSubclass:
        return self.subclasses[self.index(tag)]


@dataclass
class SceneInput:
    grid: np.ndarray  # G x G x C
    provenance: str = "synthetic"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise PreconditionError(f"Scene grid must be G x G x C, got shape {self.grid.shape}")

    @property
    def grid_size(self) -> int:
        return self.grid.shape[0]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


@dataclass
class SyntheticExample:
    scene: SceneInput
    target: BBox
    detections: List[Detection]
    gt_tags: np.ndarray  # multi-hot over TagVocabulary
    gt_caption: str

    def __post_init__(self):
        if not self.gt_caption.strip():
            raise PreconditionError("gt_caption must be non-empty")
        self.gt_tags = np.asarray(self.gt_tags, dtype=np.float64)
        if self.gt_tags.sum() < 1:
            raise PreconditionError("gt_tags needs at least one positive tag")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        for name, value in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lam)):
            if value < 0 or not math.isfinite(value):
                raise ConfigError(f"Loss weight {name} must be a finite non-negative float, got {value}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.lam)


@dataclass(frozen=True)
class TrainingConfig:
    # [training]
    seed: int = 42
    batch_size: int = 8
    steps: int = 300
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_p: float = 0.1
    dataset_size: int = 32
    # [model]
    grid_size: int = 8
    channels: int = 8
    d_v: int = 32
    d_t: int = 32
    d_c: int = 32
    d_s: int = 32
    d_llm: int = 48
    vocab_size: int = 512
    roi_size: int = 7
    sampling_ratio: int = 2
    num_heads: int = 4
    mlp_hidden: int = 64
    num_queries: int = 8
    num_tags_per_subclass: int = 16
    tau_init: float = 10.0
    bias_init: float = -10.0
    top_k_tags: int = 4
    vocab_file: str = ""
    tag_vocab_file: str = ""
    # [god]
    god: GodConfig = field(default_factory=GodConfig)
    # [loss_weights]
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        dims = ("batch_size", "grid_size", "channels", "d_v", "d_t", "d_c", "d_s", "d_llm",
                "vocab_size", "roi_size", "sampling_ratio", "num_heads", "mlp_hidden",
                "num_queries", "num_tags_per_subclass", "top_k_tags", "dataset_size")
        for name in dims:
            if getattr(self, name) < 1:
                raise ConfigError(f"TrainingConfig.{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"TrainingConfig.steps must be >= 0, got {self.steps}")
        if self.d_v % self.num_heads != 0:
            raise ConfigError(f"num_heads ({self.num_heads}) must divide d_v ({self.d_v})")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must lie in [0,1), got {self.dropout_p}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.tau_init <= 0:
            raise ConfigError(f"tau_init must be positive, got {self.tau_init}")

    def with_overrides(self, **changes) -> "TrainingConfig":
        return replace(self, **changes)

    def minimized(self) -> "TrainingConfig":
        """Dims small enough for whole-model finite-difference checks."""
        return replace(self, batch_size=2, grid_size=4, channels=3, d_v=8, d_t=8, d_c=8, d_s=8,
                       d_llm=8, vocab_size=32, roi_size=2, sampling_ratio=1, num_heads=2,
                       mlp_hidden=8, num_queries=2, num_tags_per_subclass=4, top_k_tags=2,
                       dataset_size=2, vocab_file="", tag_vocab_file="", god=replace(self.god, k=1, j=2))

    def model_dims(self) -> Dict[str, Any]:
        """Fields that must agree between a checkpoint and a model."""
        keys = ("grid_size", "channels", "d_v", "d_t", "d_c", "d_s", "d_llm", "vocab_size",
                "roi_size", "sampling_ratio", "num_heads", "mlp_hidden", "num_queries",
                "num_tags_per_subclass")
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["god"]["discrepancy_mode"] = self.god.discrepancy_mode.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingConfig":
        data = dict(data)
        god = dict(data.pop("god", {}))
        if "discrepancy_mode" in god:
            god["discrepancy_mode"] = DiscrepancyMode(god["discrepancy_mode"])
        weights = dict(data.pop("loss_weights", {}))
        return cls(god=GodConfig(**god), loss_weights=LossWeights(**weights), **data)


@dataclass
class StepRecord:
    step: int
    l_tag: float
    l_cap: float
    l_cond: float
    l_multi: float
    total: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvaluationReport:
    l_tag: float
    l_cap: float
    l_cond: float
    l_multi: float
    total: float
    tag_recall_at_k: float
    examples: int
    extra: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if data["extra"] is None:
            data.pop("extra")
        return data
