"""Nearest-neighbor retrieval over whole-image embeddings.

The default embedding is deliberately cheap: bilinear-downsample the image to
16 x 16 x 3, flatten, subtract the vector's own mean, and scale to unit
Euclidean length (a constant image embeds to the zero vector). An alternative
extractor reuses a trained network's query conv path as the feature map.

Search is a brute-force linear scan under Euclidean distance; ties are broken
by ascending entry id so results never depend on insertion order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor
from .errors import ConfigurationError, IndexFormatError

if TYPE_CHECKING:  # pragma: no cover
    from .corpus import Corpus
    from .model import McnnParams

INDEX_MAGIC = b"KNNX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class DownsampleExtractor:
    """Bilinear downsample to size x size x 3, mean-subtract, L2-normalize."""

    size: int = 16


@dataclass(frozen=True)
class ConvPathExtractor:
    """Embed with the query conv path of a trained network; same normalization."""

    params: "McnnParams"


Extractor = DownsampleExtractor | ConvPathExtractor


def _resize_bilinear(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Pixel-center-aligned bilinear resample of an [H, W, C] array."""
    src = np.asarray(image, dtype=np.float64)
    sh, sw = src.shape[:2]
    oh, ow = out_hw
    ys = np.clip((np.arange(oh) + 0.5) * sh / oh - 0.5, 0, sh - 1)
    xs = np.clip((np.arange(ow) + 0.5) * sw / ow - 0.5, 0, sw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _normalize_vector(v: np.ndarray) -> np.ndarray:
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v, dtype=np.float32)
    return (v / norm).astype(np.float32)


def embed_image(image: np.ndarray, extractor: Extractor) -> np.ndarray:
    """Embed one HWC image with the given extractor; returns float32 [D]."""
    if isinstance(extractor, DownsampleExtractor):
        small = _resize_bilinear(np.asarray(image, dtype=np.float64) / 255.0,
                                 (extractor.size, extractor.size))
        return _normalize_vector(small.reshape(-1))
    if isinstance(extractor, ConvPathExtractor):
        from .corpus import to_network_input

        params = extractor.params
        x = to_network_input(image).astype(np.float64)
        for layer in params.single_i:
            x = tensor.relu(tensor.conv2d_forward(x, layer))
        return _normalize_vector(x.reshape(-1))
    raise ConfigurationError(f"unknown embedding extractor {extractor!r}")


@dataclass
class KnnIndex:
    """Brute-force Euclidean index: ids plus an [N, D] float32 embedding matrix."""

    ids: list[str]
    vectors: np.ndarray
    extractor: Extractor = field(default_factory=DownsampleExtractor)

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise ConfigurationError("index needs one embedding row per id")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("index ids must be unique")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def build_index(
    corpus: "Corpus", split: str = "train", extractor: Extractor | None = None
) -> KnnIndex:
    """Embed every entry of a split into a fresh index."""
    if extractor is None:
        extractor = DownsampleExtractor()
    ids = list(corpus.split_ids(split))
    if not ids:
        raise ConfigurationError(f"cannot build an index over empty split {split!r}")
    vectors = np.stack([embed_image(corpus.entries[i].image, extractor) for i in ids])
    return KnnIndex(ids=ids, vectors=vectors.astype(np.float32), extractor=extractor)


def retrieve_knn(
    index: KnnIndex, query: np.ndarray, k: int, exclude: str | None = None
) -> list[str]:
    """Ids of the k nearest entries by Euclidean distance, nearest first.

    `exclude` drops one id before ranking (leave-one-out retrieval). Distance
    ties are broken by ascending id.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dim:
        raise ConfigurationError(
            f"query has dim {query.shape[0]}, index stores dim {index.dim}"
        )
    candidates = [i for i, eid in enumerate(index.ids) if eid != exclude]
    if k < 1 or k > len(candidates):
        raise ConfigurationError(
            f"k={k} outside 1..{len(candidates)} available index entries"
        )
    diffs = index.vectors.astype(np.float64) - query
    d2 = np.einsum("nd,nd->n", diffs, diffs)
    ranked = sorted(candidates, key=lambda i: (d2[i], index.ids[i]))
    return [index.ids[i] for i in ranked[:k]]


# ---------------------------------------------------------------------------
# Index cache file: magic "KNNX", version, dim, count, then per entry an
# id (u32 length + UTF-8 bytes) and dim little-endian float32 values.
# ---------------------------------------------------------------------------


def save_index(index: KnnIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, index.dim, len(index)))
        for eid, vec in zip(index.ids, index.vectors):
            raw = eid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise IndexFormatError(f"truncated index file while reading {what}")
    return data


def load_index(path: str | Path, extractor: Extractor | None = None) -> KnnIndex:
    """Read an index cache; the extractor is not stored and must be re-supplied."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != INDEX_MAGIC:
            raise IndexFormatError(f"{path} is not an embedding index cache")
        version, dim, count = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != INDEX_VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        ids: list[str] = []
        vectors = np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, "id length"))
            ids.append(_read_exact(fh, id_len, "id").decode("utf-8"))
            vectors[i] = np.frombuffer(
                _read_exact(fh, 4 * dim, "embedding"), dtype="<f4"
            )
        if fh.read(1):
            raise IndexFormatError(f"trailing bytes at the end of {path}")
    if extractor is None:
        extractor = DownsampleExtractor()
    return KnnIndex(ids=ids, vectors=vectors, extractor=extractor)
