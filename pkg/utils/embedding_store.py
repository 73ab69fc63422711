# =====================================================
# utils/embedding_store.py
# =====================================================

"""
Binary embedding store with a JSON-lines caption manifest.

File layout (little-endian throughout):

    magic        4 bytes  b"DI2W"
    version      uint16
    d            uint32
    record count uint32
    records      one per image:
        id length uint16, id utf-8 bytes
        width, height uint32
        embedding float32[d]
        crop count uint32, then per crop: x, y, w, h uint32 + float32[d]
        caption count uint32, then per caption: token count uint32,
            token ids uint32[n], sentence embedding float32[d]

The manifest sidecar (``<path>.manifest.jsonl``) holds one line per caption:
``{"id": image id, "caption": text, "tokens": [ids]}``.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import (
    BadMagicError,
    DimensionMismatchError,
    DuplicateIdError,
    InvalidInputError,
    NonFiniteValueError,
    StoreError,
    TruncatedStoreError,
    UnresolvedImageError,
    UnsupportedVersionError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

MAGIC = b"DI2W"
VERSION = 1
DEFAULT_DIM = 768
MANIFEST_SUFFIX = ".manifest.jsonl"

_HEADER = struct.Struct("<4sHII")
_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned crop in pixels; (x, y) is the top-left corner."""
    x: int
    y: int
    w: int
    h: int

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def intersects(self, other: "CropBox") -> bool:
        return (self.x < other.x + other.w and other.x < self.x + self.w
                and self.y < other.y + other.h and other.y < self.y + self.h)

    def overlap(self, other: "CropBox") -> int:
        """Shared area in pixels."""
        dx = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        dy = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        return max(dx, 0) * max(dy, 0)


@dataclass
class ImageRecord:
    id: str
    width: int
    height: int
    embedding: np.ndarray
    crop_candidates: List[Tuple[CropBox, np.ndarray]] = field(default_factory=list)


@dataclass
class CaptionRecord:
    image_id: str
    tokens: List[int]
    sentence_embedding: np.ndarray
    text: str = ""


Record = Union[ImageRecord, CaptionRecord]


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """
    Scale a vector to unit L2 norm.

    Args:
        v: Non-zero vector

    Returns:
        np.ndarray: ``v / ||v||`` in float64
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroVectorError("cannot normalize a zero (or non-finite) vector")
    return v / norm


def l2_normalize_rows(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; returns (normalized rows, row norms)."""
    matrix = np.asarray(matrix)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVectorError("zero-norm row in a normalized computation")
    return matrix / norms, norms


def _check_vector(v: np.ndarray, d: int, what: str) -> np.ndarray:
    v = np.array(v, dtype=np.float64)
    if v.shape != (d,):
        raise DimensionMismatchError(f"{what}: expected dimension {d}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValueError(f"{what}: non-finite embedding value")
    with np.errstate(over="ignore"):
        stored = v.astype(np.float32)
    if not np.all(np.isfinite(stored)):
        raise NonFiniteValueError(f"{what}: value overflows float32 storage")
    return v


class EmbeddingStore:
    """Immutable, validated collection of image and caption records sharing one dimension."""

    def __init__(self, d: int, images: Sequence[ImageRecord], captions: Sequence[CaptionRecord] = (),
                 crop_min: Optional[int] = None):
        if d < 1:
            raise InvalidInputError(f"store dimension must be >= 1, got {d}")
        self.d = int(d)
        self.images: Tuple[ImageRecord, ...] = tuple(images)
        self.captions: Tuple[CaptionRecord, ...] = tuple(captions)
        self._index: Dict[str, int] = {}
        self._captions_by_image: Dict[str, List[CaptionRecord]] = {}
        self._validate(crop_min)
        self._freeze()

    @classmethod
    def from_records(cls, records: Iterable[Record], d: Optional[int] = None,
                     crop_min: Optional[int] = None) -> "EmbeddingStore":
        images, captions = [], []
        for record in records:
            if isinstance(record, ImageRecord):
                images.append(record)
            elif isinstance(record, CaptionRecord):
                captions.append(record)
            else:
                raise InvalidInputError(f"unsupported record type {type(record).__name__}")
        if d is None:
            first = images[0].embedding if images else (captions[0].sentence_embedding if captions else None)
            d = DEFAULT_DIM if first is None else int(np.asarray(first).shape[0])
        return cls(d, images, captions, crop_min=crop_min)

    def _validate(self, crop_min: Optional[int]):
        for image in self.images:
            if image.id in self._index:
                raise DuplicateIdError(f"duplicate image id {image.id!r}")
            self._index[image.id] = len(self._index)
            image.embedding = _check_vector(image.embedding, self.d, f"image {image.id}")
            if image.crop_candidates and crop_min is not None:
                if image.width < 2 * crop_min or image.height < 2 * crop_min:
                    raise InvalidInputError(
                        f"image {image.id} ({image.width}x{image.height}) too small for crops >= {crop_min}")
            checked = []
            for box, emb in image.crop_candidates:
                if not box.within(image.width, image.height):
                    raise InvalidInputError(f"crop {box} outside image {image.id}")
                checked.append((box, _check_vector(emb, self.d, f"crop of {image.id}")))
            image.crop_candidates = checked
            self._captions_by_image[image.id] = []
        for caption in self.captions:
            if caption.image_id not in self._index:
                raise UnresolvedImageError(f"caption references unknown image {caption.image_id!r}")
            if len(caption.tokens) == 0:
                raise InvalidInputError(f"empty caption for image {caption.image_id!r}")
            caption.tokens = [int(t) for t in caption.tokens]
            caption.sentence_embedding = _check_vector(
                caption.sentence_embedding, self.d, f"caption of {caption.image_id}")
            self._captions_by_image[caption.image_id].append(caption)

    def _freeze(self):
        for image in self.images:
            image.embedding.flags.writeable = False
            for _, emb in image.crop_candidates:
                emb.flags.writeable = False
        for caption in self.captions:
            caption.sentence_embedding.flags.writeable = False

    def __len__(self) -> int:
        return len(self.images)

    def image(self, image_id: str) -> ImageRecord:
        return self.images[self._index[image_id]]

    def index_of(self, image_id: str) -> int:
        return self._index[image_id]

    def captions_for(self, image_id: str) -> List[CaptionRecord]:
        return list(self._captions_by_image.get(image_id, []))

    def captioned_images(self) -> List[ImageRecord]:
        return [img for img in self.images if self._captions_by_image.get(img.id)]

    def image_matrix(self) -> np.ndarray:
        if not self.images:
            return np.zeros((0, self.d))
        return np.stack([img.embedding for img in self.images])

    # -------------------------------------------------
    # Persistence
    # -------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [_HEADER.pack(MAGIC, VERSION, self.d, len(self.images))]
        for image in self.images:
            raw_id = image.id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise InvalidInputError(f"image id too long: {image.id[:40]}...")
            chunks.append(struct.pack("<H", len(raw_id)))
            chunks.append(raw_id)
            chunks.append(struct.pack("<II", image.width, image.height))
            chunks.append(image.embedding.astype(_F32).tobytes())
            chunks.append(struct.pack("<I", len(image.crop_candidates)))
            for box, emb in image.crop_candidates:
                chunks.append(struct.pack("<IIII", box.x, box.y, box.w, box.h))
                chunks.append(emb.astype(_F32).tobytes())
            captions = self._captions_by_image[image.id]
            chunks.append(struct.pack("<I", len(captions)))
            for caption in captions:
                chunks.append(struct.pack("<I", len(caption.tokens)))
                chunks.append(np.asarray(caption.tokens, dtype=_U32).tobytes())
                chunks.append(caption.sentence_embedding.astype(_F32).tobytes())
        return b"".join(chunks)

    def save(self, path: str) -> int:
        """Write the binary store plus its manifest sidecar; returns bytes written to ``path``."""
        payload = self.to_bytes()
        try:
            with open(path, "wb") as f:
                f.write(payload)
            write_manifest(self, manifest_path(path))
        except OSError as e:
            raise StoreError(f"Store write failed: {e}") from e
        logger.info(f"Wrote store {path}: {len(self.images)} images, {len(self.captions)} captions, d={self.d}")
        return len(payload)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "EmbeddingStore":
        reader = _Reader(payload)
        magic, version, d, count = _HEADER.unpack(reader.take(_HEADER.size))
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported store version {version}")
        images, captions = [], []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", reader.take(2))
            image_id = reader.take(id_len).decode("utf-8")
            width, height = struct.unpack("<II", reader.take(8))
            embedding = reader.floats(d)
            (n_crops,) = struct.unpack("<I", reader.take(4))
            crops = []
            for _ in range(n_crops):
                box = CropBox(*struct.unpack("<IIII", reader.take(16)))
                crops.append((box, reader.floats(d)))
            images.append(ImageRecord(image_id, width, height, embedding, crops))
            (n_captions,) = struct.unpack("<I", reader.take(4))
            for _ in range(n_captions):
                (n_tokens,) = struct.unpack("<I", reader.take(4))
                tokens = np.frombuffer(reader.take(4 * n_tokens), dtype=_U32).tolist()
                captions.append(CaptionRecord(image_id, tokens, reader.floats(d)))
        if reader.remaining:
            raise StoreError(f"{reader.remaining} trailing bytes after {count} declared records")
        return cls(d, images, captions)

    @classmethod
    def load(cls, path: str) -> "EmbeddingStore":
        try:
            with open(path, "rb") as f:
                payload = f.read()
        except OSError as e:
            raise StoreError(f"Store read failed: {e}") from e
        store = cls.from_bytes(payload)
        sidecar = manifest_path(path)
        if os.path.exists(sidecar):
            texts = read_manifest(sidecar)
            for caption, row in zip(store.captions, texts):
                caption.text = row.get("caption", "")
        logger.info(f"Loaded store {path}: {len(store.images)} images, d={store.d}")
        return store


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.payload) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise TruncatedStoreError(
                f"truncated payload: needed {n} bytes at offset {self.offset}, {self.remaining} left")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def floats(self, d: int) -> np.ndarray:
        values = np.frombuffer(self.take(4 * d), dtype=_F32).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError(f"non-finite embedding value before offset {self.offset}")
        return values


def manifest_path(path: str) -> str:
    return f"{path}{MANIFEST_SUFFIX}"


def write_manifest(store: EmbeddingStore, path: str):
    rows = []
    for image in store.images:
        for caption in store.captions_for(image.id):
            rows.append({"id": image.id, "caption": caption.text, "tokens": list(caption.tokens)})
    df = pd.DataFrame(rows, columns=["id", "caption", "tokens"])
    with open(path, "w", encoding="utf-8") as f:
        if len(df):
            f.write(df.to_json(orient="records", lines=True, force_ascii=False).rstrip("\n") + "\n")


def read_manifest(path: str) -> List[Dict]:
    if os.path.getsize(path) == 0:
        return []
    df = pd.read_json(path, orient="records", lines=True, dtype=False)
    return df.to_dict(orient="records")


# Convenience functions
def write_store(records: Iterable[Record], path: str, d: Optional[int] = None) -> int:
    return EmbeddingStore.from_records(records, d=d).save(path)


def read_store(path: str) -> EmbeddingStore:
    return EmbeddingStore.load(path)
