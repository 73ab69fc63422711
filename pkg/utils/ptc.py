# =====================================================
# utils/ptc.py
# =====================================================

"""
Pseudo triplet construction.

For a batch of captioned images: pick a crop per image, compare captions with
crops and originals, keep the pairs whose crop misses caption context while the
original matches it, then swap some references for the most similar other crop
or other original in the batch.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.config import PTCConfig
from utils.embedding_store import CaptionRecord, CropBox, ImageRecord, l2_normalize_rows
from utils.errors import BatchSizeError, CropGeometryError, DimensionMismatchError

logger = logging.getLogger(__name__)

__all__ = [
    "CropBox", "Provenance", "BatchSim", "PseudoTriplet", "FilterStats",
    "crop_is_feasible", "in_central_region", "sample_crop_box", "compute_batch_sims",
    "filter_triplets", "mine_reference", "mine_reference_source", "construct_pseudo_triplets",
]


class Provenance(str, Enum):
    SELF_CROP = "self_crop"
    OTHER_CROP = "other_crop"
    OTHER_ORIGINAL = "other_original"


@dataclass
class BatchSim:
    sim_t2vc: np.ndarray
    sim_t2v: np.ndarray
    sim_vc2vc: np.ndarray
    sim_v2v: np.ndarray
    theta_t2vc: float
    theta_t2v: float
    V: Optional[np.ndarray] = None
    Vc: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return int(self.sim_t2v.shape[0])


@dataclass
class PseudoTriplet:
    reference: np.ndarray
    caption_tokens: List[int]
    caption_embedding: np.ndarray
    target: np.ndarray
    provenance: Provenance
    target_id: str = ""
    reference_id: str = ""

    def to_row(self) -> Dict:
        return {
            "reference_id": self.reference_id,
            "provenance": self.provenance.value,
            "caption_tokens": list(self.caption_tokens),
            "target_id": self.target_id,
        }


@dataclass
class FilterStats:
    """Running counters over the batches seen by ``construct_pseudo_triplets``."""
    batches: int = 0
    candidates: int = 0
    kept: int = 0
    provenance: Counter = field(default_factory=Counter)
    theta_t2vc_sum: float = 0.0
    theta_t2v_sum: float = 0.0

    def update(self, sims: BatchSim, triplets: Sequence[PseudoTriplet]):
        self.batches += 1
        self.candidates += sims.m
        self.kept += len(triplets)
        self.provenance.update(t.provenance.value for t in triplets)
        self.theta_t2vc_sum += sims.theta_t2vc
        self.theta_t2v_sum += sims.theta_t2v

    def to_dict(self) -> Dict:
        n = max(self.batches, 1)
        return {
            "batches": self.batches,
            "candidates": self.candidates,
            "kept": self.kept,
            "keep_rate": self.kept / self.candidates if self.candidates else 0.0,
            "provenance": {p.value: self.provenance.get(p.value, 0) for p in Provenance},
            "mean_theta_t2vc": self.theta_t2vc_sum / n,
            "mean_theta_t2v": self.theta_t2v_sum / n,
        }


# -----------------------------------------------------
# Crop geometry
# -----------------------------------------------------

def in_central_region(box: CropBox, width: int, height: int) -> bool:
    """True when the box center lies strictly inside the middle third of both axes."""
    cx, cy = box.center
    return width / 3.0 < cx < 2.0 * width / 3.0 and height / 3.0 < cy < 2.0 * height / 3.0


def crop_is_feasible(width: int, height: int, config: PTCConfig) -> bool:
    if width < config.crop_min or height < config.crop_min:
        return False
    if not config.center_exclusion:
        return True
    # a box of the smallest size pushed to an edge has its center at crop_min / 2
    return config.crop_min <= 2.0 * width / 3.0 or config.crop_min <= 2.0 * height / 3.0


def sample_crop_box(width: int, height: int, rng: np.random.Generator, config: PTCConfig) -> CropBox:
    """
    Draw a crop box uniformly over the feasible set by rejection sampling.

    Args:
        width: Image width in pixels
        height: Image height in pixels
        rng: Seeded generator (the ``crop`` stream)
        config: Crop range and center-exclusion switch

    Returns:
        CropBox with crop_min <= w, h <= crop_max, inside the image, center outside the central region
    """
    if not crop_is_feasible(width, height, config):
        raise CropGeometryError(
            f"no {config.crop_min}-{config.crop_max}px crop fits a {width}x{height} image"
            + (" with center exclusion" if config.center_exclusion else ""))
    max_w = min(config.crop_max, width)
    max_h = min(config.crop_max, height)
    for _ in range(config.max_crop_attempts):
        w = int(rng.integers(config.crop_min, max_w + 1))
        h = int(rng.integers(config.crop_min, max_h + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        box = CropBox(x, y, w, h)
        if config.center_exclusion and in_central_region(box, width, height):
            continue
        return box
    raise CropGeometryError(f"rejection sampling exhausted {config.max_crop_attempts} attempts")


# -----------------------------------------------------
# Similarities and filtering
# -----------------------------------------------------

def compute_batch_sims(T: np.ndarray, V: np.ndarray, Vc: np.ndarray, cosine_everywhere: bool = False) -> BatchSim:
    """
    Caption/crop/original similarities for one batch.

    Text-image scores are raw dot products; image-image matrices are cosine.
    ``cosine_everywhere`` normalizes the text-image scores too.
    """
    T, V, Vc = (np.asarray(a, dtype=np.float64) for a in (T, V, Vc))
    if T.ndim != 2 or T.shape != V.shape or V.shape != Vc.shape:
        raise DimensionMismatchError(f"batch shapes differ: T{T.shape} V{V.shape} Vc{Vc.shape}")
    m = T.shape[0]
    if m < 2:
        raise BatchSizeError(f"batch statistics need m >= 2, got {m}")

    Vn, _ = l2_normalize_rows(V)
    Vcn, _ = l2_normalize_rows(Vc)
    if cosine_everywhere:
        Tn, _ = l2_normalize_rows(T)
        sim_t2vc = np.einsum("ij,ij->i", Tn, Vcn)
        sim_t2v = np.einsum("ij,ij->i", Tn, Vn)
    else:
        sim_t2vc = np.einsum("ij,ij->i", T, Vc)
        sim_t2v = np.einsum("ij,ij->i", T, V)
    return BatchSim(
        sim_t2vc=sim_t2vc,
        sim_t2v=sim_t2v,
        sim_vc2vc=Vcn @ Vcn.T,
        sim_v2v=Vn @ Vn.T,
        theta_t2vc=float(sim_t2vc.mean()),
        theta_t2v=float(sim_t2v.mean()),
        V=V,
        Vc=Vc,
    )


def filter_triplets(sims: BatchSim, crop_filter: str = "complementary", target_filter: str = "relevant") -> List[int]:
    """
    Indices whose crop misses caption context and whose original matches it.

    Default modes keep ``{i : sim_t2vc[i] < theta_t2vc and sim_t2v[i] > theta_t2v}``
    with strict inequalities; the other modes exist for ablations.
    """
    if crop_filter == "complementary":
        crop_ok = sims.sim_t2vc < sims.theta_t2vc
    elif crop_filter == "relevant":
        crop_ok = sims.sim_t2vc > sims.theta_t2vc
    else:
        crop_ok = np.ones(sims.m, dtype=bool)
    if target_filter == "relevant":
        target_ok = sims.sim_t2v > sims.theta_t2v
    elif target_filter == "irrelevant":
        target_ok = sims.sim_t2v < sims.theta_t2v
    else:
        target_ok = np.ones(sims.m, dtype=bool)
    return [int(i) for i in np.flatnonzero(crop_ok & target_ok)]


def _argmax_excluding(row: np.ndarray, i: int) -> int:
    row = np.array(row, dtype=np.float64)
    row[i] = -np.inf
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(row))


def mine_reference_source(i: int, sims: BatchSim, x: float, config: PTCConfig) -> Tuple[int, Provenance]:
    """Pick the reference source (batch index, provenance) for kept index ``i`` from draw ``x``."""
    if sims.m < 2:
        raise BatchSizeError("reference mining needs m >= 2")
    if not config.use_mining:
        return i, Provenance.SELF_CROP
    if not config.use_crops:
        return _argmax_excluding(sims.sim_v2v[i], i), Provenance.OTHER_ORIGINAL
    if x < config.p_other_crop:
        return _argmax_excluding(sims.sim_vc2vc[i], i), Provenance.OTHER_CROP
    if x < config.p_other_crop + config.p_other_original:
        return _argmax_excluding(sims.sim_v2v[i], i), Provenance.OTHER_ORIGINAL
    return i, Provenance.SELF_CROP


def mine_reference(i: int, sims: BatchSim, x: float, config: PTCConfig) -> Tuple[np.ndarray, Provenance]:
    """
    Reference embedding for kept index ``i``.

    Args:
        i: Index that passed ``filter_triplets``
        sims: Batch similarities (must carry the batch ``V`` / ``Vc``)
        x: Uniform draw in [0, 1)
        config: Mixture probabilities and ablation switches

    Returns:
        tuple: (reference embedding, Provenance)
    """
    j, provenance = mine_reference_source(i, sims, x, config)
    source = sims.V if provenance == Provenance.OTHER_ORIGINAL else sims.Vc
    return source[j], provenance


# -----------------------------------------------------
# Algorithm driver
# -----------------------------------------------------

def construct_pseudo_triplets(batch: Sequence[Tuple[ImageRecord, CaptionRecord]], rng: np.random.Generator,
                              config: PTCConfig, mixture_rng: Optional[np.random.Generator] = None,
                              stats: Optional[FilterStats] = None) -> List[PseudoTriplet]:
    """
    Build pseudo triplets for one batch of captioned images.

    Args:
        batch: (image, caption) pairs; every image needs at least one crop candidate
        rng: Crop-selection stream
        config: Crop range, filter modes and mixture probabilities
        mixture_rng: Stream for the reference-mining draws (defaults to ``rng``)
        stats: Optional FilterStats updated in place

    Returns:
        list: PseudoTriplet per kept index, in batch order (may be empty)
    """
    m = len(batch)
    if m < 2:
        raise BatchSizeError(f"pseudo triplet construction needs m >= 2, got {m}")
    mixture_rng = mixture_rng or rng

    crops = []
    for image, _ in batch:
        if not image.crop_candidates:
            raise CropGeometryError(f"image {image.id} has no crop candidates")
        crops.append(image.crop_candidates[int(rng.integers(len(image.crop_candidates)))])

    T = np.stack([caption.sentence_embedding for _, caption in batch])
    V = np.stack([image.embedding for image, _ in batch])
    Vc = np.stack([emb for _, emb in crops])
    sims = compute_batch_sims(T, V, Vc, cosine_everywhere=config.cosine_everywhere)
    keep = filter_triplets(sims, config.crop_filter, config.target_filter)

    triplets = []
    for i in keep:
        j, provenance = mine_reference_source(i, sims, float(mixture_rng.random()), config)
        source = V if provenance == Provenance.OTHER_ORIGINAL else Vc
        image, caption = batch[i]
        triplets.append(PseudoTriplet(
            reference=source[j],
            caption_tokens=list(caption.tokens),
            caption_embedding=caption.sentence_embedding,
            target=image.embedding,
            provenance=provenance,
            target_id=image.id,
            reference_id=batch[j][0].id,
        ))
    if stats is not None:
        stats.update(sims, triplets)
    logger.debug(f"PTC batch m={m}: kept {len(triplets)} (theta_t2vc={sims.theta_t2vc:.4f}, "
                 f"theta_t2v={sims.theta_t2v:.4f})")
    return triplets
