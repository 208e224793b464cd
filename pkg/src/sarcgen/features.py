"""Precomputed image patch features: file formats and a seeded synthetic stand-in."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, ShapeError

MAGIC = b"SGIF"
_HEADER = struct.Struct("<4sII")


@dataclass
class ImageFeatures:
    grid: np.ndarray  # (P, d) float32
    source: str = "loaded"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2 or self.grid.shape[0] < 1:
            raise ShapeError(f"image grid must be P x d with P >= 1, got shape {self.grid.shape}")
        if not np.isfinite(self.grid).all():
            raise NumericError("image grid contains non-finite values")

    @property
    def shape(self):
        return self.grid.shape


def synthetic_features(image_ref: str, n_patches: int, dim: int) -> ImageFeatures:
    """Standard-normal grid seeded by a hash of ``image_ref``."""
    seed = int.from_bytes(hashlib.sha256(image_ref.encode("utf-8")).digest()[:8], "little")
    grid = np.random.default_rng(seed).standard_normal((n_patches, dim)).astype(np.float32)
    return ImageFeatures(grid, source="synthetic")


def save_features(path, features: ImageFeatures) -> None:
    path = Path(path)
    p, d = features.grid.shape
    if path.suffix == ".json":
        path.write_text(json.dumps({"P": p, "d": d, "data": features.grid.tolist()}))
    else:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, p, d))
            fh.write(features.grid.astype("<f4").tobytes())


def load_features(path) -> ImageFeatures:
    """Read a feature file: JSON ``{"P", "d", "data"}`` or binary (magic, P, d, float32 LE)."""
    path = Path(path)
    if path.suffix == ".json":
        obj = json.loads(path.read_text())
        grid = np.asarray(obj["data"], dtype=np.float32)
        p, d = obj["P"], obj["d"]
    else:
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: truncated feature header")
        magic, p, d = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        body = raw[_HEADER.size:]
        if len(body) != 4 * p * d:
            raise DataError(f"{path}: expected {p * d} floats, found {len(body) // 4}")
        grid = np.frombuffer(body, dtype="<f4").reshape(p, d)
    if grid.shape != (p, d):
        raise ShapeError(f"{path}: header says {(p, d)}, data is {grid.shape}")
    return ImageFeatures(grid.copy(), source="loaded")


class FeatureStore:
    """Resolves image_ref to features: ``<dir>/<ref>.bin`` or ``.json``, else synthetic."""

    def __init__(self, features_dir=None, n_patches: int = 8, dim: int = 64):
        self.features_dir = Path(features_dir) if features_dir else None
        self.n_patches = n_patches
        self.dim = dim
        self._cache: dict[str, ImageFeatures] = {}

    def get(self, image_ref: str) -> ImageFeatures:
        if image_ref not in self._cache:
            self._cache[image_ref] = self._resolve(image_ref)
        return self._cache[image_ref]

    def _resolve(self, image_ref: str) -> ImageFeatures:
        if self.features_dir is not None:
            for suffix in (".bin", ".json"):
                path = self.features_dir / f"{image_ref}{suffix}"
                if path.exists():
                    feats = load_features(path)
                    if feats.grid.shape[1] != self.dim or feats.grid.shape[0] > self.n_patches:
                        raise ShapeError(
                            f"{path}: shape {feats.grid.shape} incompatible with "
                            f"{self.n_patches} patches of dim {self.dim}")
                    return feats
            raise DataError(f"no feature file for image_ref {image_ref!r} in {self.features_dir}")
        return synthetic_features(image_ref, self.n_patches, self.dim)
