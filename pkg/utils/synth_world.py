# =====================================================
# utils/synth_world.py
# =====================================================

"""
Deterministic synthetic world: images as spatial concept compositions.

Each scene is a set of concepts placed on grid cells and rendered once per
style. Captions name only part of a scene's concepts, so crops can carry the
context a caption leaves out.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.config import EncoderConfig, PTCConfig, WorldConfig, config_to_dict, substream
from utils.embedding_store import CaptionRecord, CropBox, EmbeddingStore, ImageRecord
from utils.encoders import RESERVED_WORDS, FrozenEncoders, embed_crop, embed_image, embed_masked, visible_fractions
from utils.errors import EmptyTaskSetError, InvalidInputError, WorldLayoutError
from utils.ptc import Provenance, PseudoTriplet, sample_crop_box
from utils.retrieval_eval import EvalQuery, EvalTaskSet, QueryTemplate, TemplateKind

logger = logging.getLogger(__name__)

STYLE_NAMES = ("cartoon", "sketch", "painting", "origami", "sculpture", "toy", "tattoo", "embroidery")


@dataclass
class Scene:
    concepts: Tuple[int, ...]
    cells: Tuple[int, ...]
    parent: Optional[int] = None


@dataclass
class SceneImage:
    id: str
    width: int
    height: int
    scene: int
    style: int
    concepts: Tuple[int, ...]
    regions: Tuple[CropBox, ...]
    components: np.ndarray
    caption_tokens: List[int] = field(default_factory=list)


@dataclass
class SynthWorld:
    config: WorldConfig
    concept_names: List[str]
    style_names: List[str]
    concept_vectors: np.ndarray
    style_vectors: np.ndarray
    scenes: List[Scene]
    images: List[SceneImage]
    encoders: FrozenEncoders
    store: Optional[EmbeddingStore] = None

    def gallery(self) -> Tuple[np.ndarray, List[str]]:
        return self.store.image_matrix(), [img.id for img in self.images]

    def to_metadata(self) -> Dict:
        return {
            "config": config_to_dict(self.config),
            "concept_names": self.concept_names,
            "style_names": self.style_names,
            "concept_vectors": self.concept_vectors.tolist(),
            "style_vectors": self.style_vectors.tolist(),
            "scenes": [{"concepts": list(s.concepts), "cells": list(s.cells), "parent": s.parent}
                       for s in self.scenes],
            "images": [{
                "id": img.id, "scene": img.scene, "style": img.style, "concepts": list(img.concepts),
                "regions": [[r.x, r.y, r.w, r.h] for r in img.regions],
                "caption_tokens": list(img.caption_tokens),
            } for img in self.images],
        }

    def save_metadata(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_metadata(), f, sort_keys=True)
        logger.info(f"Saved world metadata to {path}")

    @classmethod
    def load(cls, metadata_path: str, store: EmbeddingStore, encoders: FrozenEncoders) -> "SynthWorld":
        with open(metadata_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        raw = dict(meta["config"])
        raw["concepts_per_image"] = tuple(raw["concepts_per_image"])
        config = WorldConfig(**raw)
        concept_vectors = np.asarray(meta["concept_vectors"], dtype=np.float64)
        style_vectors = np.asarray(meta["style_vectors"], dtype=np.float64)
        scenes = [Scene(tuple(s["concepts"]), tuple(s["cells"]), s["parent"]) for s in meta["scenes"]]
        images = []
        for row in meta["images"]:
            concepts = tuple(row["concepts"])
            images.append(SceneImage(
                id=row["id"], width=config.image_size, height=config.image_size, scene=row["scene"],
                style=row["style"], concepts=concepts, regions=tuple(CropBox(*r) for r in row["regions"]),
                components=_styled(concept_vectors, style_vectors, concepts, row["style"], config.style_scale),
                caption_tokens=list(row["caption_tokens"]),
            ))
        return cls(config, meta["concept_names"], meta["style_names"], concept_vectors, style_vectors,
                   scenes, images, encoders, store)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    M = rng.normal(size=(n, dim))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def _styled(concept_vectors, style_vectors, concepts, style, style_scale) -> np.ndarray:
    if not concepts:
        return np.zeros((0, concept_vectors.shape[1]))
    return concept_vectors[list(concepts)] + style_scale * style_vectors[style]


def _cell_box(cell: int, grid: int, size: int) -> CropBox:
    side = size // grid
    return CropBox((cell % grid) * side, (cell // grid) * side, side, side)


def style_names_for(count: int) -> List[str]:
    return [STYLE_NAMES[i] if i < len(STYLE_NAMES) else f"style{i}" for i in range(count)]


def _make_scenes(config: WorldConfig, rng: np.random.Generator) -> List[Scene]:
    n_cells = config.grid * config.grid
    lo, hi = config.concepts_per_image
    if hi > n_cells:
        raise WorldLayoutError(f"{hi} concepts do not fit a {config.grid}x{config.grid} layout")
    if hi > config.concept_count:
        raise WorldLayoutError(f"scenes of {hi} concepts need at least {hi} concepts, have {config.concept_count}")
    n_scenes = math.ceil(config.image_count / config.style_count)
    scenes: List[Scene] = []
    seen = set()
    for _ in range(n_scenes):
        for _attempt in range(1000):
            if scenes and rng.random() < config.variant_fraction:
                parent = int(rng.integers(len(scenes)))
                base = scenes[parent]
                outside = [c for c in range(config.concept_count) if c not in base.concepts]
                if not outside:
                    continue
                concepts = list(base.concepts)
                concepts[int(rng.integers(len(concepts)))] = int(outside[int(rng.integers(len(outside)))])
                scene = Scene(tuple(concepts), base.cells, parent)
            else:
                k = int(rng.integers(lo, hi + 1))
                concepts = tuple(int(c) for c in rng.choice(config.concept_count, size=k, replace=False))
                cells = tuple(int(c) for c in rng.choice(n_cells, size=k, replace=False))
                scene = Scene(concepts, cells)
            key = frozenset(scene.concepts)
            if key not in seen:
                seen.add(key)
                scenes.append(scene)
                break
        else:
            raise WorldLayoutError("could not draw enough distinct concept sets; raise concept_count")
    return scenes


def _sample_content_crop(image: SceneImage, rng: np.random.Generator, ptc_config: PTCConfig,
                         attempts: int = 1000) -> CropBox:
    """Crop candidate that overlaps at least one concept region (empty crops embed to zero)."""
    for _ in range(attempts):
        box = sample_crop_box(image.width, image.height, rng, ptc_config)
        if any(box.intersects(region) for region in image.regions):
            return box
    raise WorldLayoutError(f"no {ptc_config.crop_min}-{ptc_config.crop_max}px crop of {image.id} touches a concept")


def _sample_mask(image: SceneImage, rng: np.random.Generator, ptc_config: PTCConfig,
                 attempts: int = 1000) -> CropBox:
    """Mask box that hides part of a concept but leaves something visible."""
    for _ in range(attempts):
        box = sample_crop_box(image.width, image.height, rng, ptc_config)
        visible = visible_fractions(image, box)
        if np.any(visible < 1.0) and np.any(visible > 0.0):
            return box
    raise WorldLayoutError(f"no {ptc_config.crop_min}-{ptc_config.crop_max}px mask of {image.id} leaves content visible")


def _caption_size(k: int, coverage: float) -> int:
    if coverage >= 1.0:
        return k
    return min(int(math.floor(coverage * k)), k - 1)


def generate_world(config: WorldConfig, encoder_config: EncoderConfig,
                   ptc_config: Optional[PTCConfig] = None) -> SynthWorld:
    """
    Generate scenes, images, captions, crop candidates and the embedding store.

    Args:
        config: World sizes, coverage, noise and seed
        encoder_config: Frozen encoder sizes and seed (token_dim must equal d)
        ptc_config: Crop range used for the precomputed crop candidates

    Returns:
        SynthWorld with ``store`` filled
    """
    config.validate()
    encoder_config.validate()
    ptc_config = ptc_config or PTCConfig()
    ptc_config.validate()
    if encoder_config.resolved_token_dim != encoder_config.d:
        raise InvalidInputError("the synthetic world anchors tokens in image space; token_dim must equal d")

    rng = substream(config.seed, "world")
    concept_dim = encoder_config.resolved_concept_dim
    concept_vectors = _unit_rows(rng, config.concept_count, concept_dim)
    style_vectors = _unit_rows(rng, config.style_count, concept_dim)
    concept_names = [f"concept{k}" for k in range(config.concept_count)]
    style_names = style_names_for(config.style_count)

    P = FrozenEncoders.build(encoder_config, list(RESERVED_WORDS)).image.P
    alpha = encoder_config.token_scale
    anchors = {name: alpha * (P @ vec) for name, vec in zip(concept_names, concept_vectors)}
    anchors.update({name: alpha * (P @ vec) for name, vec in zip(style_names, style_vectors)})
    encoders = FrozenEncoders.build(encoder_config, list(RESERVED_WORDS) + style_names + concept_names, anchors)
    image_params = replace(encoders.image, sigma=float(config.noise_sigma), noise_seed=int(config.seed))

    scenes = _make_scenes(config, rng)
    caption_rng = substream(config.seed, "world", 1)
    crop_rng = substream(config.seed, "crop")
    images: List[SceneImage] = []
    image_records: List[ImageRecord] = []
    caption_records: List[CaptionRecord] = []
    size = config.image_size
    for scene_idx, scene in enumerate(scenes):
        for style in range(config.style_count):
            if len(images) >= config.image_count:
                break
            image = SceneImage(
                id=f"img{len(images):05d}", width=size, height=size, scene=scene_idx, style=style,
                concepts=scene.concepts, regions=tuple(_cell_box(c, config.grid, size) for c in scene.cells),
                components=_styled(concept_vectors, style_vectors, scene.concepts, style, config.style_scale),
            )
            named = caption_rng.permutation(len(scene.concepts))[:_caption_size(len(scene.concepts), config.coverage)]
            words = [concept_names[scene.concepts[i]] for i in sorted(named)] + [style_names[style]]
            image.caption_tokens = encoders.vocab.encode(words)
            images.append(image)

            crops = []
            for _ in range(config.crops_per_image):
                if ptc_config.crop_mode == "mask":
                    box = _sample_mask(image, crop_rng, ptc_config)
                    crops.append((box, embed_masked(image, box, image_params)))
                else:
                    box = _sample_content_crop(image, crop_rng, ptc_config)
                    crops.append((box, embed_crop(image, box, image_params)))
            image_records.append(ImageRecord(image.id, size, size, embed_image(image, image_params), crops))
            caption_records.append(CaptionRecord(
                image.id, image.caption_tokens, encoders.encode_caption(image.caption_tokens), " ".join(words)))

    store = EmbeddingStore(encoder_config.d, image_records, caption_records)
    logger.info(f"Generated world: {len(scenes)} scenes, {len(images)} images, "
                f"{config.concept_count} concepts, {config.style_count} styles, d={encoder_config.d}")
    return SynthWorld(config, concept_names, style_names, concept_vectors, style_vectors,
                      scenes, images, encoders, store)


# -----------------------------------------------------
# Evaluation tasks
# -----------------------------------------------------

def _subsample(queries: List[EvalQuery], max_queries: Optional[int], rng: np.random.Generator) -> List[EvalQuery]:
    if max_queries is None or len(queries) <= max_queries:
        return queries
    pick = sorted(rng.choice(len(queries), size=max_queries, replace=False))
    return [queries[i] for i in pick]


def make_eval_tasks(world: SynthWorld, kind, max_queries: Optional[int] = None, seed: int = 0) -> EvalTaskSet:
    """
    Ground-truth retrieval tasks derived from world metadata.

    Args:
        world: Generated world (store filled)
        kind: TemplateKind or its string value
        max_queries: Optional cap (seeded subsample)
        seed: Seed of the ``eval`` stream

    Returns:
        EvalTaskSet over the full image gallery
    """
    kind = TemplateKind(kind)
    gallery, gallery_ids = world.gallery()
    vocab = world.encoders.vocab
    by_scene_style = {(img.scene, img.style): i for i, img in enumerate(world.images)}
    concept_sets = [frozenset(img.concepts) for img in world.images]
    queries: List[EvalQuery] = []

    if kind == TemplateKind.OBJECT_COMPOSITION:
        image_params = replace(world.encoders.image, sigma=float(world.config.noise_sigma),
                               noise_seed=int(world.config.seed))
        for img in world.images:
            if len(img.concepts) < 2:
                continue
            reference = embed_crop(img, img.regions[0], image_params)
            tags = vocab.encode([world.concept_names[c] for c in img.concepts[1:]])
            wanted = frozenset(img.concepts)
            truth = {i for i, s in enumerate(concept_sets) if wanted <= s}
            queries.append(EvalQuery(f"{img.id}/obj", reference, QueryTemplate.objects(tags), truth))

    elif kind == TemplateKind.DOMAIN_CONVERSION:
        for i, img in enumerate(world.images):
            for offset in range(1, world.config.style_count):
                style = (img.style + offset) % world.config.style_count
                j = by_scene_style.get((img.scene, style))
                if j is None:
                    continue
                truth = {t for t, other in enumerate(world.images)
                         if other.style == style and concept_sets[t] == concept_sets[i]}
                tag = vocab.id(world.style_names[style])
                queries.append(EvalQuery(f"{img.id}/to-{world.style_names[style]}", gallery[i],
                                         QueryTemplate.domain(tag), truth))
                break

    else:
        for child_idx, scene in enumerate(world.scenes):
            if scene.parent is None:
                continue
            parent = world.scenes[scene.parent]
            added = [c for c in scene.concepts if c not in parent.concepts]
            for style in range(world.config.style_count):
                i = by_scene_style.get((scene.parent, style))
                if i is None or (child_idx, style) not in by_scene_style:
                    continue
                target_set = frozenset(scene.concepts)
                truth = {t for t, other in enumerate(world.images)
                         if other.style == style and concept_sets[t] == target_set}
                tokens = vocab.encode([world.concept_names[c] for c in added])
                queries.append(EvalQuery(f"{world.images[i].id}/swap-{child_idx}", gallery[i],
                                         QueryTemplate.sentence(tokens), truth))

    if not queries:
        raise EmptyTaskSetError(f"world has no valid {kind.value} instances")
    queries = _subsample(queries, max_queries, substream(seed, "eval", list(TemplateKind).index(kind)))
    for q in queries:
        q.truth_ids = [gallery_ids[t] for t in sorted(q.truth)]
    logger.info(f"Built {len(queries)} {kind.value} queries over a gallery of {len(gallery_ids)}")
    return EvalTaskSet(kind.value, queries, gallery, gallery_ids)


def random_triplets(encoders: FrozenEncoders, m: int, seed: int = 0, caption_length: int = 3) -> List[PseudoTriplet]:
    """
    Pseudo triplets with Gaussian references/targets and random caption tokens.

    Used by the gradient check, where no world is needed.
    """
    if m < 1 or caption_length < 1:
        raise InvalidInputError("m and caption_length must be >= 1")
    rng = substream(seed, "world", 2)
    free = [i for i, w in enumerate(encoders.vocab.words) if w not in RESERVED_WORDS] or \
        [encoders.vocab.id(w) for w in RESERVED_WORDS if w != "[*]"]
    triplets = []
    for i in range(m):
        tokens = [int(free[int(t)]) for t in rng.integers(len(free), size=caption_length)]
        triplets.append(PseudoTriplet(
            reference=rng.normal(size=encoders.d),
            caption_tokens=tokens,
            caption_embedding=encoders.encode_caption(tokens),
            target=rng.normal(size=encoders.d),
            provenance=Provenance.SELF_CROP,
            target_id=f"t{i}",
            reference_id=f"t{i}",
        ))
    return triplets
