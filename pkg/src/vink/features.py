"""Per-patch feature vectors and their binary cache.

Extraction is pluggable: anything that yields one D-dimensional vector per
256x256 patch can feed the classifier. The built-in toy extractor computes
cheap color/gradient statistics; externally computed embeddings of any width
enter through the same cache format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotation import PatchLabel
from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateRecord,
    TruncatedFile,
    VersionMismatch,
)
from .filters import sobel_magnitude
from .slide_io import RasterImage

CACHE_MAGIC = b"VINF"
CACHE_VERSION = 1
TOY_DIM = 64
TOY_EXTRACTOR_ID = "toy-histogram-v1"

_SOBEL_MAX = 255.0 * 4.0 * np.sqrt(2.0)  # largest possible 3x3 Sobel magnitude


@dataclass(frozen=True)
class FeatureRecord:
    region_id: tuple[int, int]
    grid_pos: tuple[int, int]
    origin: tuple[int, int]
    label: PatchLabel
    vector: np.ndarray  # float32, length = cache dimension


@dataclass
class FeatureCache:
    dimension: int
    extractor_id: str
    records: list[FeatureRecord] = field(default_factory=list)

    def validate(self) -> None:
        if self.dimension < 1:
            raise DimensionMismatch(f"dimension must be >= 1, got {self.dimension}")
        seen = set()
        for rec in self.records:
            if len(rec.vector) != self.dimension:
                raise DimensionMismatch(
                    f"record {rec.region_id}/{rec.grid_pos} has {len(rec.vector)} values, "
                    f"header says {self.dimension}"
                )
            key = (rec.region_id, rec.grid_pos)
            if key in seen:
                raise DuplicateRecord(f"duplicate record for {key}")
            seen.add(key)


_LEVELS = np.arange(256, dtype=np.int64)
_LEVELS_SQ = _LEVELS * _LEVELS


def extract_toy(patch: RasterImage) -> np.ndarray:
    """Deterministic 64-dim features for one 256x256 patch, all in [0, 1]:
    16-bin histogram per RGB channel (48), per-channel mean and std (6),
    8-bin Sobel-magnitude histogram (8), non-white fraction (1), zero pad.

    Color statistics come from exact integer histograms; the Sobel magnitude
    is float32, which keeps the histogram exactly permutation-invariant under
    90-degree rotation.
    """
    if patch.width != 256 or patch.height != 256:
        raise DimensionMismatch(f"patch must be 256x256, got {patch.width}x{patch.height}")
    px = patch.pixels
    n = 256 * 256
    out = np.zeros(TOY_DIM, dtype=np.float64)
    for c in range(3):
        hist = np.bincount(px[:, :, c].ravel(), minlength=256)
        out[c * 16 : (c + 1) * 16] = hist.reshape(16, 16).sum(axis=1) / n
        mean = float((hist * _LEVELS).sum()) / n
        var = float((hist * _LEVELS_SQ).sum()) / n - mean * mean
        out[48 + c] = mean / 255.0
        out[51 + c] = np.sqrt(max(var, 0.0)) / 127.5
    chan_sum = px.sum(axis=2, dtype=np.float32)
    mag = sobel_magnitude(chan_sum * np.float32(1.0 / 3.0))
    bins = np.minimum((mag * np.float32(8.0 / _SOBEL_MAX)).astype(np.int32), 7)
    out[54:62] = np.bincount(bins.ravel(), minlength=8) / n
    out[62] = 1.0 - np.count_nonzero(chan_sum == np.float32(765.0)) / n
    return out.astype(np.float32)


_HEADER = struct.Struct("<4sIIQ")  # magic, version, dimension, record count
_RECORD_FIXED = struct.Struct("<IIBBqqB")  # region r/c, grid r/c, origin x/y, label


def write_cache(cache: FeatureCache, path: str | Path) -> None:
    cache.validate()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.dimension, len(cache.records)))
        ident = cache.extractor_id.encode("utf-8")
        fh.write(struct.pack("<H", len(ident)))
        fh.write(ident)
        for rec in cache.records:
            fh.write(
                _RECORD_FIXED.pack(
                    rec.region_id[0],
                    rec.region_id[1],
                    rec.grid_pos[0],
                    rec.grid_pos[1],
                    rec.origin[0],
                    rec.origin[1],
                    int(rec.label),
                )
            )
            fh.write(np.ascontiguousarray(rec.vector, dtype="<f4").tobytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise TruncatedFile(f"file ended reading {what}")
    return data


def read_cache(path: str | Path) -> FeatureCache:
    with open(path, "rb") as fh:
        magic, version, dim, count = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
        if magic != CACHE_MAGIC:
            raise BadMagic(f"expected {CACHE_MAGIC!r}, got {magic!r}")
        if version != CACHE_VERSION:
            raise VersionMismatch(f"cache version {version} unsupported")
        if dim < 1:
            raise DimensionMismatch(f"header dimension {dim} invalid")
        (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "extractor id length"))
        extractor_id = _read_exact(fh, id_len, "extractor id").decode("utf-8")
        records = []
        vec_bytes = 4 * dim
        for _ in range(count):
            rr, rc, gr, gc, ox, oy, label = _RECORD_FIXED.unpack(
                _read_exact(fh, _RECORD_FIXED.size, "record header")
            )
            vec = np.frombuffer(_read_exact(fh, vec_bytes, "feature vector"), dtype="<f4").copy()
            records.append(
                FeatureRecord(
                    region_id=(rr, rc),
                    grid_pos=(gr, gc),
                    origin=(ox, oy),
                    label=PatchLabel(label),
                    vector=vec,
                )
            )
    cache = FeatureCache(dimension=dim, extractor_id=extractor_id, records=records)
    cache.validate()
    return cache


def import_external(path: str | Path, extractor_id: str) -> FeatureCache:
    """Load a cache produced elsewhere (any dimension), tagging it with the
    caller's extractor id for provenance. Validation matches read_cache."""
    cache = read_cache(path)
    cache.extractor_id = extractor_id
    return cache
