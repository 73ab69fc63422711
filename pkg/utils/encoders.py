# =====================================================
# utils/encoders.py
# =====================================================

"""
Frozen toy encoders standing in for a pre-trained vision-language pair.

The image side projects concept vectors through a fixed matrix ``P``; the text
side pools token embeddings with fixed position weights and applies one frozen
tanh layer. Only inputs (the pseudo-word slot) ever receive gradients.
"""

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from utils.config import EncoderConfig, config_to_dict, substream
from utils.embedding_store import CropBox
from utils.errors import (
    CropGeometryError,
    DimensionMismatchError,
    EncoderError,
    MissingSlotError,
    TemplateError,
    UnknownTokenError,
)

logger = logging.getLogger(__name__)

SLOT = "[*]"
RESERVED_WORDS = (SLOT, "a", "photo", "of", ",", "and", "that")


class PromptKind(str, Enum):
    DOMAIN = "domain"        # a <tag> of [*]
    GLOBAL = "global"        # a photo of [*]   (slot appended)
    COMPOSE = "compose"      # a photo of [*] <connective> <caption>
    OBJECT = "object"        # a photo of [*] , <t1> and <t2> ...
    SENTENCE = "sentence"    # a photo of [*] , <sentence>
    CAPTION = "caption"      # a photo of <caption>   (no slot)


SLOT_KINDS = {PromptKind.DOMAIN, PromptKind.GLOBAL, PromptKind.COMPOSE, PromptKind.OBJECT, PromptKind.SENTENCE}


class WorldImage(Protocol):
    """Concept-composition descriptor consumed by the image encoder."""
    id: str
    width: int
    height: int
    regions: Sequence[CropBox]
    components: np.ndarray  # one styled concept vector per region


# -----------------------------------------------------
# Vocabulary
# -----------------------------------------------------

class Vocabulary:
    """Frozen word list with a seeded token-embedding table."""

    def __init__(self, words: Sequence[str], token_dim: int, seed: int = 0,
                 anchors: Optional[Dict[str, np.ndarray]] = None, function_word_scale: float = 0.1):
        words = list(words)
        missing = [w for w in RESERVED_WORDS if w not in words]
        if missing:
            raise EncoderError(f"vocabulary is missing reserved words {missing}")
        if len(set(words)) != len(words):
            raise EncoderError("vocabulary words must be unique")
        self.words: Tuple[str, ...] = tuple(words)
        self.token_dim = int(token_dim)
        self._ids = {w: i for i, w in enumerate(self.words)}
        anchors = anchors or {}

        rng = substream(seed, "vocab")
        table = rng.normal(size=(len(self.words), self.token_dim)) * function_word_scale / np.sqrt(self.token_dim)
        table[self._ids[SLOT]] = 0.0
        for word, vector in anchors.items():
            vector = np.asarray(vector, dtype=np.float64)
            if vector.shape != (self.token_dim,):
                raise DimensionMismatchError(f"anchor for {word!r} has shape {vector.shape}")
            table[self.id(word)] = vector
        if not np.all(np.isfinite(table)):
            raise EncoderError("non-finite token embedding")
        table.flags.writeable = False
        self.table = table
        self.anchors = {w: np.asarray(v, dtype=np.float64) for w, v in anchors.items()}

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def slot_id(self) -> int:
        return self._ids[SLOT]

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise UnknownTokenError(f"unknown word {word!r}") from None

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        self.check_ids(ids)
        return [self.words[i] for i in ids]

    def render(self, ids: Sequence[int]) -> str:
        return " ".join(self.decode(ids))

    def check_ids(self, ids: Sequence[int]):
        for token in ids:
            if not 0 <= int(token) < self.size:
                raise UnknownTokenError(f"token id {token} outside vocabulary of size {self.size}")


# -----------------------------------------------------
# Prompts
# -----------------------------------------------------

@dataclass
class PromptSequence:
    token_ids: List[int]
    token_embeddings: np.ndarray
    slot_index: Optional[int] = None
    filled: bool = False

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise EncoderError("prompt must hold at least one token")
        if self.slot_index is not None and not 0 <= self.slot_index < len(self.token_ids):
            raise EncoderError(f"slot index {self.slot_index} outside prompt of length {len(self.token_ids)}")

    def __len__(self) -> int:
        return len(self.token_ids)

    def with_slot(self, pseudo_token: np.ndarray) -> "PromptSequence":
        """Copy of this prompt with the slot row replaced by ``pseudo_token``."""
        if self.slot_index is None:
            raise MissingSlotError("prompt has no pseudo-token slot")
        pseudo_token = np.asarray(pseudo_token, dtype=np.float64)
        if pseudo_token.shape != (self.token_embeddings.shape[1],):
            raise DimensionMismatchError(
                f"pseudo token shape {pseudo_token.shape} does not match token_dim {self.token_embeddings.shape[1]}")
        embeddings = self.token_embeddings.copy()
        embeddings[self.slot_index] = pseudo_token
        return PromptSequence(list(self.token_ids), embeddings, self.slot_index, True)


def prompt_words(kind: PromptKind, extra: List[str], connective: str = ",") -> List[str]:
    kind = PromptKind(kind)
    if kind == PromptKind.DOMAIN:
        if len(extra) != 1:
            raise TemplateError(f"domain prompt takes exactly one tag, got {len(extra)}")
        return ["a", extra[0], "of", SLOT]
    if kind == PromptKind.GLOBAL:
        if extra:
            raise TemplateError("global prompt takes no extra tokens")
        return ["a", "photo", "of", SLOT]
    if not extra:
        raise TemplateError(f"{kind.value} prompt needs at least one extra token")
    if kind == PromptKind.COMPOSE:
        return ["a", "photo", "of", SLOT, connective] + extra
    if kind == PromptKind.OBJECT:
        tags = [extra[0]]
        for tag in extra[1:]:
            tags += ["and", tag]
        return ["a", "photo", "of", SLOT, ","] + tags
    if kind == PromptKind.SENTENCE:
        return ["a", "photo", "of", SLOT, ","] + extra
    return ["a", "photo", "of"] + extra


def prompt_length(kind: PromptKind, n_extra: int) -> int:
    kind = PromptKind(kind)
    return {
        PromptKind.DOMAIN: 4,
        PromptKind.GLOBAL: 4,
        PromptKind.COMPOSE: 5 + n_extra,
        PromptKind.OBJECT: 4 + 2 * n_extra,
        PromptKind.SENTENCE: 5 + n_extra,
        PromptKind.CAPTION: 3 + n_extra,
    }[kind]


def build_prompt(kind, pseudo_token: Optional[np.ndarray], extra_tokens: Sequence[int],
                 vocab: Vocabulary, connective: str = ",") -> PromptSequence:
    """
    Render a prompt template into a token-embedding sequence.

    Args:
        kind: PromptKind (or its string value)
        pseudo_token: Optional token_dim vector placed at the ``[*]`` slot
        extra_tokens: Vocabulary ids (domain tag, object tags, caption or sentence)
        vocab: Frozen vocabulary
        connective: Word joining ``[*]`` and the caption in compose prompts

    Returns:
        PromptSequence with ``slot_index`` at the ``[*]`` position
    """
    kind = PromptKind(kind)
    vocab.check_ids(extra_tokens)
    words = prompt_words(kind, vocab.decode(extra_tokens), connective)
    ids = vocab.encode(words)
    slot_index = words.index(SLOT) if kind in SLOT_KINDS else None
    if kind not in SLOT_KINDS and pseudo_token is not None:
        raise TemplateError(f"{kind.value} prompt has no slot for a pseudo token")
    seq = PromptSequence(ids, vocab.table[ids].copy(), slot_index)
    if pseudo_token is not None:
        seq = seq.with_slot(pseudo_token)
    return seq


# -----------------------------------------------------
# Text encoder
# -----------------------------------------------------

@dataclass
class ToyTextParams:
    omega: np.ndarray   # position weights, frozen
    W1: np.ndarray      # hidden x token_dim
    b1: np.ndarray
    W2: np.ndarray      # d x hidden
    b2: np.ndarray

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"omega": self.omega, "W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def init_text_params(config: EncoderConfig) -> ToyTextParams:
    """Seeded near-linear text encoder: W1 = (g/alpha)(I + eps), W2 = I/g + eps, alpha = token_scale."""
    rng = substream(config.seed, "encoder", 1)
    token_dim, d = config.resolved_token_dim, config.d
    hidden = token_dim
    eps = config.text_perturbation
    g = config.text_gain
    alpha = config.token_scale
    omega = rng.uniform(0.75, 1.25, size=config.max_prompt_length)
    W1 = (g / alpha) * (np.eye(hidden, token_dim) + eps * rng.normal(size=(hidden, token_dim)) / np.sqrt(token_dim))
    b1 = g * eps * rng.normal(size=hidden) / np.sqrt(hidden)
    W2 = np.eye(d, hidden) / g + eps * rng.normal(size=(d, hidden)) / np.sqrt(hidden)
    b2 = eps * rng.normal(size=d) / np.sqrt(d)
    params = ToyTextParams(omega, W1, b1, W2, b2)
    for arr in params.arrays().values():
        arr.flags.writeable = False
    return params


def pool_weights(length: int, params: ToyTextParams) -> np.ndarray:
    if length > params.omega.shape[0]:
        raise EncoderError(f"prompt of length {length} exceeds the encoder context of {params.omega.shape[0]}")
    w = params.omega[:length]
    return w / w.sum()


def pool(seq: PromptSequence, params: ToyTextParams) -> np.ndarray:
    if seq.slot_index is not None and not seq.filled:
        raise MissingSlotError("prompt slot was never filled with a pseudo token")
    if seq.token_embeddings.shape[1] != params.W1.shape[1]:
        raise DimensionMismatchError(
            f"token_dim {seq.token_embeddings.shape[1]} does not match encoder input {params.W1.shape[1]}")
    return pool_weights(len(seq), params) @ seq.token_embeddings


def project(pooled: np.ndarray, params: ToyTextParams) -> Tuple[np.ndarray, np.ndarray]:
    """Frozen head on pooled rows; returns (sentence embeddings, hidden activations)."""
    h = np.tanh(pooled @ params.W1.T + params.b1)
    return h @ params.W2.T + params.b2, h


def text_forward(seq: PromptSequence, params: ToyTextParams) -> np.ndarray:
    s, _ = project(pool(seq, params), params)
    return s


def project_vjp(h: np.ndarray, upstream: np.ndarray, params: ToyTextParams) -> np.ndarray:
    """Vector-Jacobian product of ``project`` w.r.t. its pooled input (rows broadcast)."""
    return ((1.0 - h ** 2) * (upstream @ params.W2)) @ params.W1


def text_input_grad(seq: PromptSequence, upstream: np.ndarray, params: ToyTextParams) -> np.ndarray:
    """
    Gradient of ``upstream . text_forward(seq)`` w.r.t. the slot token embedding.

    Args:
        seq: Prompt with a filled slot
        upstream: d-vector
        params: Frozen text parameters

    Returns:
        np.ndarray: token_dim gradient at ``seq.slot_index``
    """
    if seq.slot_index is None:
        raise MissingSlotError("text_input_grad needs a prompt with a pseudo-token slot")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.W2.shape[0],):
        raise DimensionMismatchError(f"upstream shape {upstream.shape} does not match d={params.W2.shape[0]}")
    weights = pool_weights(len(seq), params)
    _, h = project(pool(seq, params), params)
    return weights[seq.slot_index] * project_vjp(h, upstream, params)


# -----------------------------------------------------
# Image encoder
# -----------------------------------------------------

@dataclass
class ToyImageParams:
    P: np.ndarray       # d x concept_dim
    sigma: float = 0.0
    noise_seed: int = 0


def init_image_params(config: EncoderConfig) -> ToyImageParams:
    rng = substream(config.seed, "encoder", 0)
    P = rng.normal(size=(config.d, config.resolved_concept_dim)) / np.sqrt(config.d)
    P.flags.writeable = False
    return ToyImageParams(P, float(config.noise_sigma), int(config.seed))


def _noise(params: ToyImageParams, image_id: str, *keys: int) -> np.ndarray:
    if params.sigma == 0.0:
        return np.zeros(params.P.shape[0])
    rng = substream(params.noise_seed, "noise", zlib.crc32(image_id.encode("utf-8")), *keys)
    return params.sigma * rng.normal(size=params.P.shape[0]) / np.sqrt(params.P.shape[0])


def _project_components(components: np.ndarray, mask: np.ndarray, params: ToyImageParams) -> np.ndarray:
    return params.P @ components[mask].sum(axis=0)


def _components(world_image: WorldImage, concept_dim: int) -> np.ndarray:
    comps = np.asarray(world_image.components, dtype=np.float64)
    if comps.size == 0:
        return np.zeros((0, concept_dim))
    if comps.ndim != 2 or comps.shape[1] != concept_dim:
        raise DimensionMismatchError(f"concept vectors of shape {comps.shape}, expected (k, {concept_dim})")
    if comps.shape[0] != len(world_image.regions):
        raise DimensionMismatchError("one region is required per concept component")
    return comps


def embed_image(world_image: WorldImage, params: ToyImageParams) -> np.ndarray:
    """v = P . sum(concept components) + seeded noise."""
    comps = _components(world_image, params.P.shape[1])
    mask = np.ones(comps.shape[0], dtype=bool)
    return _project_components(comps, mask, params) + _noise(params, world_image.id)


def embed_crop(world_image: WorldImage, box: CropBox, params: ToyImageParams) -> np.ndarray:
    """Embedding of the concepts whose region intersects ``box``."""
    if not box.within(world_image.width, world_image.height):
        raise CropGeometryError(f"crop {box} outside {world_image.width}x{world_image.height} image")
    comps = _components(world_image, params.P.shape[1])
    mask = np.array([box.intersects(region) for region in world_image.regions], dtype=bool)
    return _project_components(comps, mask, params) + _noise(params, world_image.id, box.x, box.y, box.w, box.h)


def visible_fractions(world_image: WorldImage, box: CropBox) -> np.ndarray:
    """Share of each concept region left uncovered by a mask over ``box``."""
    return np.array([1.0 - box.overlap(region) / float(region.w * region.h) for region in world_image.regions])


def embed_masked(world_image: WorldImage, box: CropBox, params: ToyImageParams) -> np.ndarray:
    """Embedding of the image with ``box`` blanked out; concepts count by their visible area."""
    if not box.within(world_image.width, world_image.height):
        raise CropGeometryError(f"mask {box} outside {world_image.width}x{world_image.height} image")
    comps = _components(world_image, params.P.shape[1])
    visible = visible_fractions(world_image, box)
    return params.P @ (visible @ comps) + _noise(params, world_image.id, box.x, box.y, box.w, box.h, 1)


# -----------------------------------------------------
# Bundle
# -----------------------------------------------------

@dataclass
class FrozenEncoders:
    config: EncoderConfig
    vocab: Vocabulary
    image: ToyImageParams
    text: ToyTextParams

    @classmethod
    def build(cls, config: EncoderConfig, words: Sequence[str],
              anchors: Optional[Dict[str, np.ndarray]] = None) -> "FrozenEncoders":
        config.validate()
        vocab = Vocabulary(words, config.resolved_token_dim, config.seed, anchors,
                           config.function_word_scale * config.token_scale)
        return cls(config, vocab, init_image_params(config), init_text_params(config))

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def token_dim(self) -> int:
        return self.config.resolved_token_dim

    def fingerprint(self) -> str:
        """SHA-256 over every frozen array; used to prove nothing was trained."""
        digest = hashlib.sha256()
        digest.update(self.vocab.table.tobytes())
        digest.update(self.image.P.tobytes())
        for arr in self.text.arrays().values():
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def encode_caption(self, tokens: Sequence[int]) -> np.ndarray:
        """Sentence embedding used as the caption's [CLS] vector."""
        return text_forward(build_prompt(PromptKind.CAPTION, None, tokens, self.vocab), self.text)

    def save(self, path: str):
        payload = {
            "config": config_to_dict(self.config),
            "words": list(self.vocab.words),
            "anchors": {w: v.tolist() for w, v in self.vocab.anchors.items()},
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        logger.info(f"Saved encoder description to {path}")

    @classmethod
    def load(cls, path: str) -> "FrozenEncoders":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        config = EncoderConfig(**payload["config"])
        anchors = {w: np.asarray(v, dtype=np.float64) for w, v in payload.get("anchors", {}).items()}
        return cls.build(config, payload["words"], anchors)
