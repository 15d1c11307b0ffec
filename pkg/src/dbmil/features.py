"""Region featurization and the FEAT1 feature-file format."""
from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

MAGIC = b"FEAT1"
GRID = 32


class FeatureFormatError(Exception):
    pass


def area_matrix(n_in: int, n_out: int = GRID) -> np.ndarray:
    """(n_out, n_in) matrix averaging input cells by exact fractional overlap."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / (n_in / n_out)


@lru_cache(maxsize=16)
def projection_matrix(seed: int, d: int) -> np.ndarray:
    signs = np.random.default_rng(seed).integers(0, 2, size=(d, GRID * GRID))
    return (2.0 * signs - 1.0) / np.sqrt(GRID * GRID)


@lru_cache(maxsize=16)
def patch_map(width: int, seed: int, d: int) -> np.ndarray:
    """(width*width, d) matrix: area downsample to 32x32 composed with the sign projection.

    Used when the window is not a multiple of 32.
    """
    a = area_matrix(width)
    down = np.kron(a, a)  # (1024, width*width), row-major flattening on both sides
    return down.T @ projection_matrix(seed, d).T


def featurize_patches(patches: np.ndarray, seed: int = 0, d: int = 128) -> np.ndarray:
    """Vectorized featurizer for a stack of square patches, shape (n, w, w) -> (n, d)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[1] != patches.shape[2] or patches.shape[1] == 0:
        raise ValueError(f"patches must be square and nonempty, got shape {patches.shape}")
    n, w = patches.shape[0], patches.shape[1]
    if n == 0:
        return np.zeros((0, d))
    flat = patches.reshape(n, w * w)
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    centered[flat.max(axis=1) == flat.min(axis=1)] = 0.0  # exact zeros despite rounding in the mean
    var = np.einsum("ij,ij->i", centered, centered)[:, None] / (w * w)
    z = centered / np.sqrt(np.maximum(var, 1e-8))
    if w % GRID:
        return np.tanh(z @ patch_map(w, seed, d))
    f = w // GRID
    z = z.reshape(n, w, w)
    small = np.zeros((n, GRID, GRID))
    for i in range(f):
        for j in range(f):
            small += z[:, i::f, j::f]
    return np.tanh((small.reshape(n, -1) / (f * f)) @ projection_matrix(seed, d).T)


def featurize_patch(patch: np.ndarray, seed: int = 0, d: int = 128) -> np.ndarray:
    """Standardize, area-downsample to 32x32, sign-project to d dims, tanh."""
    patch = np.asarray(patch)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1] or patch.size == 0:
        raise ValueError(f"patch must be square and nonempty, got shape {patch.shape}")
    return featurize_patches(patch[None], seed, d)[0]


class FeatureStore:
    """(image_id, region_index) -> feature vector, all of one dimension."""

    def __init__(self, dim: int):
        self.dim = dim
        self._images: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add_image(self, image_id: str, region_indices, vectors) -> None:
        idx = np.asarray(region_indices, dtype=np.int64)
        vec = np.asarray(vectors, dtype=np.float32).reshape(len(idx), self.dim)
        if len(set(idx.tolist())) != len(idx):
            raise FeatureFormatError(f"duplicate region index for {image_id!r}")
        if not np.isfinite(vec).all():
            raise FeatureFormatError(f"non-finite feature values for {image_id!r}")
        if image_id in self._images:
            old_idx, old_vec = self._images[image_id]
            if set(old_idx.tolist()) & set(idx.tolist()):
                raise FeatureFormatError(f"duplicate (image_id, region_index) for {image_id!r}")
            idx = np.concatenate([old_idx, idx])
            vec = np.concatenate([old_vec, vec])
        order = np.argsort(idx, kind="stable")
        self._images[image_id] = (idx[order], vec[order])

    def __len__(self) -> int:
        return sum(len(i) for i, _ in self._images.values())

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._images

    @property
    def image_ids(self) -> list[str]:
        return list(self._images)

    def regions(self, image_id: str) -> np.ndarray:
        return self._images[image_id][0]

    def get(self, image_id: str, region_index: int) -> np.ndarray:
        try:
            idx, vec = self._images[image_id]
        except KeyError:
            raise KeyError(f"no features for image {image_id!r}") from None
        pos = np.searchsorted(idx, region_index)
        if pos >= len(idx) or idx[pos] != region_index:
            raise KeyError(f"no features for region {region_index} of image {image_id!r}")
        return vec[pos]

    def matrix(self, image_id: str, region_indices=None) -> np.ndarray:
        """Features of an image as (m, dim) float32, in ascending region order."""
        try:
            idx, vec = self._images[image_id]
        except KeyError:
            raise KeyError(f"no features for image {image_id!r}") from None
        if region_indices is None:
            return vec
        want = np.asarray(region_indices, dtype=np.int64)
        pos = np.searchsorted(idx, want)
        pos = np.minimum(pos, max(len(idx) - 1, 0))
        if len(want) and (len(idx) == 0 or not np.array_equal(idx[pos], want)):
            raise KeyError(f"missing region features for image {image_id!r}")
        return vec[pos]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureStore) or other.dim != self.dim:
            return False
        if list(self._images) != list(other._images):
            return False
        return all(
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            for a, b in zip(self._images.values(), other._images.values())
        )

    def write(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", len(self), self.dim))
            for image_id, (idx, vec) in self._images.items():
                name = image_id.encode("utf-8")
                for i, v in zip(idx, vec):
                    fh.write(struct.pack("<H", len(name)))
                    fh.write(name)
                    fh.write(struct.pack("<I", int(i)))
                    fh.write(v.astype("<f4").tobytes())


def ingest_features(path: str | Path) -> FeatureStore:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {data[:5]!r}, expected {MAGIC!r}")
    if len(data) < 13:
        raise FeatureFormatError(f"{path}: truncated header ({len(data)} of 13 bytes)")
    count, dim = struct.unpack_from("<II", data, 5)
    pos = 13
    rows: dict[str, tuple[list[int], list[np.ndarray]]] = {}
    for r in range(count):
        if pos + 2 > len(data):
            raise FeatureFormatError(
                f"{path}: truncated at record {r}: expected at least {pos + 2} bytes, got {len(data)}")
        (n,) = struct.unpack_from("<H", data, pos)
        end = pos + 2 + n + 4 + 4 * dim
        if end > len(data):
            raise FeatureFormatError(
                f"{path}: truncated at record {r}: expected at least {end} bytes, got {len(data)}")
        image_id = data[pos + 2:pos + 2 + n].decode("utf-8")
        (region,) = struct.unpack_from("<I", data, pos + 2 + n)
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + 6 + n)
        idx_list, vec_list = rows.setdefault(image_id, ([], []))
        idx_list.append(region)
        vec_list.append(vec)
        pos = end
    if pos != len(data):
        raise FeatureFormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    store = FeatureStore(dim)
    for image_id, (idx, vecs) in rows.items():
        store.add_image(image_id, idx, np.stack(vecs) if vecs else np.zeros((0, dim)))
    return store
