# agrg/ingestion/synth.py

"""
Synthetic chest-CT stand-in: volumes with injected geometric anomalies, their
binary label vectors, and template-grammar reference reports.

Each label owns one primitive shape and one HU intensity offset. A case is fully
determined by its seed: label presence is drawn first, then per-anomaly geometry,
then the smooth background field and the raw (pre-crop) grid size, each from its
own derived stream. Reports follow a closed grammar in which every sentence of
label i contains label i's name as its anchor phrase, which makes label
extraction from text exact.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.ndimage import gaussian_filter

from agrg.errors import ConfigError, LabelError
from agrg.ingestion.common_utils import make_rng, split_sentences

logger = logging.getLogger(__name__)

# --- SYNTHESIS CONFIGURATION ---
HU_FLOOR = -1000.0
HU_CEILING = 200.0
PAD_VALUE = -1.0
BACKGROUND_HU = -700.0
BACKGROUND_SPREAD_HU = 60.0
BACKGROUND_SMOOTHING = 3.0
SIZE_BUCKETS = ("small", "moderate", "large")


class DatasetConfig(BaseModel):
    """Dataset generation parameters (desk-scale defaults)."""
    k: int = Field(6, ge=1, le=18)
    shape: Tuple[int, int, int] = (24, 48, 48)
    p: float = Field(0.35, ge=0.0, le=1.0)
    raw_jitter: int = Field(2, ge=0)
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(400, ge=1)
    n_test: int = Field(400, ge=1)
    base_seed: int = Field(0, ge=0)

# ==============================================================================
# 1. LABEL REGISTRY & TEMPLATE GRAMMAR
# ==============================================================================

CHEST_CT_LABELS: Tuple[str, ...] = (
    "Medical material",
    "Arterial wall calcification",
    "Cardiomegaly",
    "Pericardial effusion",
    "Coronary artery wall calcification",
    "Hiatal hernia",
    "Lymphadenopathy",
    "Emphysema",
    "Atelectasis",
    "Lung nodule",
    "Lung opacity",
    "Pulmonary fibrotic sequela",
    "Pleural effusion",
    "Mosaic attenuation pattern",
    "Peribronchial thickening",
    "Consolidation",
    "Bronchiectasis",
    "Interlobular septal thickening",
)

# One primitive per label; labels beyond the sixth reuse shapes at a brighter offset.
PRIMITIVE_KINDS: Tuple[str, ...] = ("sphere", "box", "shell", "rod", "slab", "checker")
KIND_INTENSITY_HU: Dict[str, float] = {
    "sphere": 420.0,
    "box": 360.0,
    "shell": 520.0,
    "rod": 580.0,
    "slab": 300.0,
    "checker": 460.0,
}

# Two sentence templates per label, keyed by label name. Slots: {size}, {location}.
REPORT_TEMPLATES: Dict[str, Tuple[str, str]] = {
    "Medical material": (
        "There is a {size} piece of medical material in the {location} region.",
        "Medical material of {size} extent is noted in the {location} region.",
    ),
    "Arterial wall calcification": (
        "There is {size} arterial wall calcification in the {location} region.",
        "Arterial wall calcification of {size} extent is seen in the {location} region.",
    ),
    "Cardiomegaly": (
        "There is {size} cardiomegaly centered in the {location} region.",
        "Cardiomegaly of {size} degree is noted toward the {location} region.",
    ),
    "Pericardial effusion": (
        "A {size} pericardial effusion is seen in the {location} region.",
        "There is a {size} pericardial effusion along the {location} region.",
    ),
    "Coronary artery wall calcification": (
        "There is {size} coronary artery wall calcification in the {location} region.",
        "Coronary artery wall calcification of {size} extent is noted in the {location} region.",
    ),
    "Hiatal hernia": (
        "A {size} hiatal hernia is seen in the {location} region.",
        "There is a {size} hiatal hernia near the {location} region.",
    ),
    "Lymphadenopathy": (
        "There is {size} lymphadenopathy in the {location} region.",
        "Lymphadenopathy of {size} extent is noted in the {location} region.",
    ),
    "Emphysema": (
        "There is {size} emphysema in the {location} lung.",
        "Emphysema of {size} extent is seen in the {location} lung.",
    ),
    "Atelectasis": (
        "There is {size} atelectasis in the {location} lung.",
        "Atelectasis of {size} extent is noted in the {location} lung.",
    ),
    "Lung nodule": (
        "A {size} lung nodule is seen in the {location} lung.",
        "There is a {size} lung nodule in the {location} lung.",
    ),
    "Lung opacity": (
        "There is a {size} lung opacity in the {location} lung.",
        "A {size} lung opacity is noted in the {location} lung.",
    ),
    "Pulmonary fibrotic sequela": (
        "There is {size} pulmonary fibrotic sequela in the {location} lung.",
        "Pulmonary fibrotic sequela of {size} extent is seen in the {location} lung.",
    ),
    "Pleural effusion": (
        "A {size} pleural effusion is seen in the {location} hemithorax.",
        "There is a {size} pleural effusion along the {location} hemithorax.",
    ),
    "Mosaic attenuation pattern": (
        "There is a {size} mosaic attenuation pattern in the {location} lung.",
        "A mosaic attenuation pattern of {size} extent is noted in the {location} lung.",
    ),
    "Peribronchial thickening": (
        "There is {size} peribronchial thickening in the {location} lung.",
        "Peribronchial thickening of {size} extent is seen in the {location} lung.",
    ),
    "Consolidation": (
        "There is a {size} consolidation in the {location} lung.",
        "Consolidation of {size} extent is noted in the {location} lung.",
    ),
    "Bronchiectasis": (
        "There is {size} bronchiectasis in the {location} lung.",
        "Bronchiectasis of {size} extent is seen in the {location} lung.",
    ),
    "Interlobular septal thickening": (
        "There is {size} interlobular septal thickening in the {location} lung.",
        "Interlobular septal thickening of {size} extent is noted in the {location} lung.",
    ),
}


def octant_phrases() -> List[str]:
    return [f"{side} {level} {face}"
            for side in ("right", "left")
            for level in ("upper", "lower")
            for face in ("anterior", "posterior")]


@dataclass(frozen=True)
class LabelRegistry:
    """Ordered abnormality names; index i everywhere refers to this order."""
    names: Tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ConfigError("label registry must not be empty")
        if len(set(self.names)) != len(self.names):
            raise LabelError(f"duplicate label names in registry: {self.names}")
        unknown = [name for name in self.names if name not in REPORT_TEMPLATES]
        if unknown:
            raise ConfigError(f"no report templates for labels {unknown}")

    @classmethod
    def default(cls, k: int = 6) -> "LabelRegistry":
        if not 1 <= k <= len(CHEST_CT_LABELS):
            raise ConfigError(f"K must be within 1..{len(CHEST_CT_LABELS)}, got {k}")
        return cls(CHEST_CT_LABELS[:k])

    @property
    def k(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def kind(self, label: int) -> str:
        return PRIMITIVE_KINDS[label % len(PRIMITIVE_KINDS)]

    def intensity(self, label: int) -> float:
        return KIND_INTENSITY_HU[self.kind(label)] + 40.0 * (label // len(PRIMITIVE_KINDS))

    def templates(self, label: int) -> Tuple[str, str]:
        return REPORT_TEMPLATES[self.names[label]]


def template_corpus(registry: LabelRegistry) -> List[str]:
    """Every sentence the grammar can produce, in a fixed enumeration order."""
    return [template.format(size=size, location=location)
            for label in range(registry.k)
            for template in registry.templates(label)
            for size in SIZE_BUCKETS
            for location in octant_phrases()]

# ==============================================================================
# 2. PREPROCESSING
# ==============================================================================

def clip_normalize_hu(raw: np.ndarray) -> np.ndarray:
    """Clips to [-1000, 200] HU and maps linearly onto [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("volume contains non-finite voxel values")
    return 2.0 * (np.clip(raw, HU_FLOOR, HU_CEILING) - HU_FLOOR) / (HU_CEILING - HU_FLOOR) - 1.0


def denormalize_hu(volume: np.ndarray) -> np.ndarray:
    """Inverse of clip_normalize_hu on [-1, 1]."""
    return (np.asarray(volume, dtype=np.float64) + 1.0) * (HU_CEILING - HU_FLOOR) / 2.0 + HU_FLOOR


def _axis_offset(raw_extent: int, target_extent: int) -> int:
    """Raw index of target index 0 (negative when the axis is padded)."""
    if raw_extent >= target_extent:
        return (raw_extent - target_extent) // 2
    return -((target_extent - raw_extent) // 2)


def crop_or_pad(volume: np.ndarray, target_shape: Sequence[int], pad_value: float = PAD_VALUE) -> np.ndarray:
    """
    Center-crops or pads each axis to the target extent.

    An odd difference leaves the extra voxel on the high-index side, both when
    cropping and when padding.
    """
    if any(extent < 1 for extent in target_shape):
        raise ConfigError(f"target extents must be positive, got {tuple(target_shape)}")
    out = np.full(tuple(target_shape), pad_value, dtype=volume.dtype)
    source, destination = [], []
    for raw_extent, target_extent in zip(volume.shape, target_shape):
        offset = _axis_offset(raw_extent, target_extent)
        start = max(offset, 0)
        stop = min(offset + target_extent, raw_extent)
        source.append(slice(start, stop))
        destination.append(slice(start - offset, stop - offset))
    out[tuple(destination)] = volume[tuple(source)]
    return out

# ==============================================================================
# 3. ANOMALY SPECS
# ==============================================================================

@dataclass(frozen=True)
class AnomalySpec:
    label: int
    kind: str
    center: Tuple[int, int, int]
    size: float
    intensity: float
    bucket: str
    octant: str
    variant: int


def _half_extents(kind: str, size: float) -> Tuple[float, float, float]:
    if kind == "rod":
        return (0.45 * size, 0.45 * size, 1.6 * size)
    if kind == "slab":
        return (0.35 * size, 1.4 * size, 1.4 * size)
    return (size, size, size)


def size_range(shape: Sequence[int]) -> Tuple[float, float]:
    """Primitive size range in voxels for a target shape."""
    smallest = min(shape)
    low = max(1.0, 0.08 * smallest)
    return low, max(low + 0.5, 0.25 * smallest)


def octant_of(center: Sequence[int], shape: Sequence[int]) -> str:
    depth, height, width = (2 * c < extent - 1 for c, extent in zip(center, shape))
    side = "right" if width else "left"
    level = "upper" if depth else "lower"
    face = "anterior" if height else "posterior"
    return f"{side} {level} {face}"


def _sample_spec(rng: np.random.Generator, label: int, registry: LabelRegistry, shape: Sequence[int]) -> AnomalySpec:
    kind = registry.kind(label)
    relative = rng.random()
    low, high = size_range(shape)
    size = low + relative * (high - low)
    bucket = SIZE_BUCKETS[min(int(relative * len(SIZE_BUCKETS)), len(SIZE_BUCKETS) - 1)]

    center = []
    for extent, half in zip(shape, _half_extents(kind, size)):
        margin = int(math.ceil(half))
        first = min(margin, (extent - 1) // 2)
        last = max(extent - 2 - margin, first)
        center.append(int(rng.integers(first, last + 1)))

    intensity = registry.intensity(label) * rng.uniform(0.9, 1.1)
    variant = int(rng.integers(0, 2))
    return AnomalySpec(label=label, kind=kind, center=tuple(center), size=float(size),
                       intensity=float(intensity), bucket=bucket,
                       octant=octant_of(center, shape), variant=variant)


def sample_case_specs(seed: int, registry: LabelRegistry, p: float,
                      shape: Sequence[int]) -> Tuple[np.ndarray, List[AnomalySpec]]:
    """Draws the label vector and the anomaly geometry of one case."""
    rng = make_rng(seed, "labels")
    labels = (rng.random(registry.k) < p).astype(np.uint8)
    geometry = make_rng(seed, "geometry")
    specs = [_sample_spec(geometry, int(label), registry, shape) for label in np.flatnonzero(labels)]
    return labels, specs

# ==============================================================================
# 4. RENDERING
# ==============================================================================

def primitive_mask(kind: str, center: Sequence[float], size: float, grid_shape: Sequence[int]) -> np.ndarray:
    """Boolean voxel mask of one primitive on a grid; voxels outside the grid are clipped."""
    dz, dy, dx = (np.arange(extent, dtype=np.float64)[tuple(slice(None) if a == axis else None for a in range(3))] - c
                  for axis, (extent, c) in enumerate(zip(grid_shape, center)))
    radius = np.sqrt(dz ** 2 + dy ** 2 + dx ** 2)
    if kind == "sphere":
        return np.broadcast_to(radius <= size, grid_shape).copy()
    if kind == "box":
        return (np.abs(dz) <= 0.8 * size) & (np.abs(dy) <= 0.8 * size) & (np.abs(dx) <= 0.8 * size)
    if kind == "shell":
        return np.broadcast_to((radius >= 0.55 * size) & (radius <= size), grid_shape).copy()
    if kind == "rod":
        return (np.sqrt(dz ** 2 + dy ** 2) <= 0.45 * size) & (np.abs(dx) <= 1.6 * size)
    if kind == "slab":
        return (np.abs(dz) <= 0.35 * size) & (np.abs(dy) <= 1.4 * size) & (np.abs(dx) <= 1.4 * size)
    if kind == "checker":
        cube = (np.abs(dz) <= size) & (np.abs(dy) <= size) & (np.abs(dx) <= size)
        parity = (np.rint(dz) + np.rint(dy) + np.rint(dx)) % 2 == 0
        return cube & parity
    raise ValueError(f"unknown primitive kind '{kind}'")


def raw_shape_for(seed: int, target_shape: Sequence[int], raw_jitter: int) -> Tuple[int, int, int]:
    rng = make_rng(seed, "raw-shape")
    jitter = rng.integers(-raw_jitter, raw_jitter + 1, size=3) if raw_jitter else np.zeros(3, dtype=int)
    return tuple(max(1, int(extent + delta)) for extent, delta in zip(target_shape, jitter))


def render_raw_volume(seed: int, specs: Sequence[AnomalySpec], target_shape: Sequence[int],
                      raw_jitter: int = 2) -> np.ndarray:
    """HU volume on the jittered raw grid: smooth background plus additive primitives."""
    raw_shape = raw_shape_for(seed, target_shape, raw_jitter)
    noise = gaussian_filter(make_rng(seed, "background").standard_normal(raw_shape), sigma=BACKGROUND_SMOOTHING)
    spread = noise.std()
    volume = BACKGROUND_HU + (BACKGROUND_SPREAD_HU * noise / spread if spread > 0 else 0.0 * noise)
    offsets = [_axis_offset(raw, target) for raw, target in zip(raw_shape, target_shape)]
    for spec in specs:
        raw_center = [c + offset for c, offset in zip(spec.center, offsets)]
        volume = volume + spec.intensity * primitive_mask(spec.kind, raw_center, spec.size, raw_shape)
    return volume


def preprocess(raw: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    return crop_or_pad(clip_normalize_hu(raw), target_shape)

# ==============================================================================
# 5. REPORTS & CASES
# ==============================================================================

def render_report(specs: Sequence[AnomalySpec], registry: LabelRegistry) -> str:
    """One templated sentence per anomaly in ascending label order, joined by single spaces."""
    return " ".join(render_sentences(specs, registry))


def render_sentences(specs: Sequence[AnomalySpec], registry: LabelRegistry) -> List[str]:
    seen = set()
    for spec in specs:
        if spec.label in seen:
            raise LabelError(f"label {spec.label} appears twice in one case")
        if not 0 <= spec.label < registry.k:
            raise LabelError(f"label index {spec.label} outside registry of size {registry.k}")
        seen.add(spec.label)
    return [registry.templates(spec.label)[spec.variant].format(size=spec.bucket, location=spec.octant)
            for spec in sorted(specs, key=lambda spec: spec.label)]


@dataclass(frozen=True, eq=False)
class SyntheticCase:
    seed: int
    volume: np.ndarray  # float32, preprocessed, target shape
    labels: np.ndarray  # uint8, length K
    report: str
    specs: Tuple[AnomalySpec, ...] = ()

    @cached_property
    def sentences(self) -> Dict[int, str]:
        """Reference sentence per positive label."""
        positives = [int(i) for i in np.flatnonzero(self.labels)]
        return dict(zip(positives, split_sentences(self.report)))


def synthesize_case(seed: int, registry: LabelRegistry, p: float = 0.35,
                    shape: Sequence[int] = (24, 48, 48), raw_jitter: int = 2) -> SyntheticCase:
    labels, specs = sample_case_specs(seed, registry, p, shape)
    raw = render_raw_volume(seed, specs, shape, raw_jitter)
    volume = preprocess(raw, shape).astype(np.float32)
    return SyntheticCase(seed=int(seed), volume=volume, labels=labels,
                         report=render_report(specs, registry), specs=tuple(specs))

# ==============================================================================
# 6. SPLITS
# ==============================================================================

@dataclass(frozen=True)
class CaseCollection:
    """A split as a seed range; cases are synthesized on access."""
    name: str
    seeds: range
    registry: LabelRegistry
    p: float
    shape: Tuple[int, int, int]
    raw_jitter: int = 2

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, index: int) -> SyntheticCase:
        return synthesize_case(self.seeds[index], self.registry, self.p, self.shape, self.raw_jitter)

    def __iter__(self) -> Iterator[SyntheticCase]:
        return (self[index] for index in range(len(self)))


def split_dataset(n_train: int, n_val: int, n_test: int, base_seed: int,
                  registry: Optional[LabelRegistry] = None, p: float = 0.35,
                  shape: Sequence[int] = (24, 48, 48), raw_jitter: int = 2) -> Dict[str, CaseCollection]:
    """Three splits over consecutive, disjoint seed ranges starting at base_seed."""
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("split counts must be positive")
    registry = registry or LabelRegistry.default()
    bounds = np.cumsum([0, n_train, n_val, n_test]) + base_seed
    return {name: CaseCollection(name, range(int(bounds[i]), int(bounds[i + 1])), registry, p,
                                 tuple(shape), raw_jitter)
            for i, name in enumerate(("train", "val", "test"))}


def split_dataset_from_config(config: DatasetConfig) -> Dict[str, CaseCollection]:
    return split_dataset(config.n_train, config.n_val, config.n_test, config.base_seed,
                         LabelRegistry.default(config.k), config.p, config.shape, config.raw_jitter)
