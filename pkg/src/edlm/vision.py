"""Image items of mixed token/image sequences and the vision-embedding fixture file.

The vision tower itself is not modelled: an image arrives as 256 precomputed
embedding rows, either attached to the item or referenced by index into a
fixture file.

Fixture layout (little-endian)::

    b"VEMB" | u16 version | u32 d_vision | u32 count | count*256*d_vision f32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import TOKENS_PER_IMAGE
from .errors import DataError, FormatError, VersionError

VISION_MAGIC = b"VEMB"
VISION_VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass(frozen=True, eq=False)
class Image:
    """One image in a sequence; expands to 256 encoder positions."""

    index: Optional[int] = None
    embedding: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, Image) or self.index != other.index:
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return np.array_equal(self.embedding, other.embedding)

    def __hash__(self):
        return hash(("Image", self.index))

    def __repr__(self):
        return f"Image(index={self.index})"


Item = Union[int, Image]
MixedSequence = Sequence[Item]


def expanded_length(seq: MixedSequence) -> int:
    return sum(TOKENS_PER_IMAGE if isinstance(it, Image) else 1 for it in seq)


def resolve(img: Image, fixture: Optional[np.ndarray]) -> np.ndarray:
    if img.embedding is not None:
        return np.asarray(img.embedding)
    if fixture is None or img.index is None:
        raise DataError("image has no embedding and no fixture to look it up in")
    if not 0 <= img.index < len(fixture):
        raise DataError(f"image index {img.index} outside fixture of {len(fixture)} images")
    return fixture[img.index]


def write_vision_fixture(path, embeddings: np.ndarray) -> None:
    emb = np.asarray(embeddings, dtype="<f4")
    if emb.ndim != 3 or emb.shape[1] != TOKENS_PER_IMAGE:
        raise DataError(f"expected [count, {TOKENS_PER_IMAGE}, d_vision], got {emb.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VISION_MAGIC, VISION_VERSION, emb.shape[2], emb.shape[0]))
        fh.write(emb.tobytes(order="C"))


def read_vision_fixture(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"vision fixture truncated: {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, d_vision, count = _HEADER.unpack_from(raw)
    if magic != VISION_MAGIC:
        raise FormatError(f"bad vision fixture magic {magic!r}")
    if version != VISION_VERSION:
        raise VersionError(f"vision fixture version {version}, expected {VISION_VERSION}")
    expected = _HEADER.size + 4 * count * TOKENS_PER_IMAGE * d_vision
    if len(raw) != expected:
        raise FormatError(f"vision fixture size mismatch: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(count, TOKENS_PER_IMAGE, d_vision)
