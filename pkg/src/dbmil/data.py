"""Dataset manifests, foreground masks, region grids, augmentation and fold splits."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .imageio import read_mask, read_pgm

log = logging.getLogger(__name__)

LESION_CLASSES = ("B", "M")


class DataError(Exception):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class LesionAnnotation:
    cls: str
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.cls not in LESION_CLASSES:
            raise DataError(f"annotation class must be B or M, got {self.cls!r}")
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"annotation has non-positive size: {self}")

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    def check_bounds(self, width: int, height: int) -> None:
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise DataError(f"annotation {self.rect} outside {width}x{height} image")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    patient_id: str
    image_path: Path
    y_m: int
    y_b: int
    mask_path: Path | None = None
    annotations: tuple[LesionAnnotation, ...] = ()

    @property
    def label(self) -> tuple[int, int]:
        return (self.y_m, self.y_b)

    @property
    def severity(self) -> str:
        """Most severe finding: 'M', 'B' or 'N'."""
        if self.y_m:
            return "M"
        return "B" if self.y_b else "N"

    def to_json(self, root: Path | None = None) -> dict:
        def rel(p: Path) -> str:
            if root is not None:
                try:
                    return p.relative_to(root).as_posix()
                except ValueError:
                    pass
            return str(p)

        obj = {
            "image_id": self.image_id,
            "patient_id": self.patient_id,
            "image_path": rel(self.image_path),
            "y_m": self.y_m,
            "y_b": self.y_b,
        }
        if self.mask_path is not None:
            obj["mask_path"] = rel(self.mask_path)
        if self.annotations:
            obj["annotations"] = [
                {"cls": a.cls, "x": a.x, "y": a.y, "w": a.w, "h": a.h} for a in self.annotations
            ]
        return obj


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen: set[str] = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DataError(f"duplicate image_id {e.image_id!r}")
            seen.add(e.image_id)
        self._index = {e.image_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, image_id: str) -> ManifestEntry:
        try:
            return self._index[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    @property
    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    def class_counts(self) -> dict[str, int]:
        counts = {"M": 0, "B": 0, "N": 0, "MB": 0}
        for e in self.entries:
            counts[e.severity] += 1
            if e.y_m and e.y_b:
                counts["MB"] += 1
        return counts

    def write(self, path: str | Path) -> None:
        path = Path(path)
        root = path.parent.resolve()
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json(root), sort_keys=True) + "\n")


def _as_bit(value, key: str, lineno: int) -> int:
    if isinstance(value, bool) or value not in (0, 1):
        raise DataError(f"line {lineno}: {key} must be 0 or 1, got {value!r}")
    return int(value)


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent.resolve()
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            for key in ("image_id", "patient_id", "image_path", "y_m", "y_b"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing key {key!r}")
            image_path = root / obj["image_path"]
            mask_path = root / obj["mask_path"] if obj.get("mask_path") else None
            try:
                anns = tuple(
                    LesionAnnotation(a["cls"], int(a["x"]), int(a["y"]), int(a["w"]), int(a["h"]))
                    for a in obj.get("annotations") or ()
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: bad annotation ({exc})") from None
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if check_paths:
                for p in (image_path, mask_path):
                    if p is not None and not p.is_file():
                        raise DataError(f"line {lineno}: file not found: {p}")
            entries.append(
                ManifestEntry(
                    image_id=str(obj["image_id"]),
                    patient_id=str(obj["patient_id"]),
                    image_path=image_path,
                    y_m=_as_bit(obj["y_m"], "y_m", lineno),
                    y_b=_as_bit(obj["y_b"], "y_b", lineno),
                    mask_path=mask_path,
                    annotations=anns,
                )
            )
    return DatasetManifest(entries, root=root)


def compute_foreground_mask(image: np.ndarray) -> np.ndarray:
    """Pixels strictly above the global mean, restricted to the largest 4-connected component."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("empty image")
    if image.min() == image.max():
        return np.zeros(image.shape, dtype=bool)  # mean rounding could otherwise flag every pixel
    above = image > image.mean()
    labels, n = ndimage.label(above)  # default structure is 4-connectivity
    if n == 0:
        return np.zeros(image.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # argmax picks the first (raster-order) component on size ties
    return labels == (int(np.argmax(sizes)) + 1)


def load_image_and_mask(entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    image = read_pgm(entry.image_path)
    if entry.mask_path is not None:
        mask = read_mask(entry.mask_path)
        if mask.shape != image.shape:
            raise DataError(f"{entry.image_id}: mask shape {mask.shape} != image shape {image.shape}")
    else:
        mask = compute_foreground_mask(image)
    height, width = image.shape
    for a in entry.annotations:
        a.check_bounds(width, height)
    return image, mask


@dataclass
class RegionGrid:
    image_id: str
    window: int
    stride: int
    indices: np.ndarray  # grid-position index, row-major ascending
    bboxes: np.ndarray  # (m, 4) int: x, y, w, h
    patches: np.ndarray | None = None  # (m, window, window)

    def __len__(self) -> int:
        return len(self.indices)


def grid_positions(length: int, window: int, stride: int) -> list[int]:
    """Offsets at multiples of stride, plus a final window flush with the edge."""
    if window > length:
        return []
    pos = list(range(0, length - window + 1, stride))
    if pos[-1] != length - window:
        pos.append(length - window)
    return pos


def extract_regions(
    image: np.ndarray,
    mask: np.ndarray,
    window: int,
    stride: int,
    coverage: float = 0.5,
    image_id: str = "",
    with_patches: bool = True,
) -> RegionGrid:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0 < coverage <= 1:
        raise ValueError("coverage must be in (0, 1]")
    if image.shape != mask.shape:
        raise ValueError("image and mask shapes differ")
    height, width = image.shape
    ys = grid_positions(height, window, stride)
    xs = grid_positions(width, window, stride)
    if not ys or not xs:
        warnings.warn(
            f"{image_id or 'image'}: window {window} larger than image {width}x{height}; no regions",
            stacklevel=2,
        )
        empty = np.zeros((0, window, window)) if with_patches else None
        return RegionGrid(image_id, window, stride, np.zeros(0, int), np.zeros((0, 4), int), empty)

    integral = np.zeros((height + 1, width + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    need = coverage * window * window
    idx, boxes = [], []
    for r, y in enumerate(ys):
        for c, x in enumerate(xs):
            covered = (
                integral[y + window, x + window] - integral[y, x + window]
                - integral[y + window, x] + integral[y, x]
            )
            if covered >= need:
                idx.append(r * len(xs) + c)
                boxes.append((x, y, window, window))
    bboxes = np.array(boxes, dtype=int).reshape(-1, 4)
    patches = None
    if with_patches:
        patches = np.stack([image[y:y + window, x:x + window] for x, y, _, _ in bboxes]) if len(bboxes) \
            else np.zeros((0, window, window))
    return RegionGrid(image_id, window, stride, np.array(idx, dtype=int), bboxes, patches)


# ---------------------------------------------------------------- augmentation

@dataclass
class Augmented:
    image: np.ndarray
    label: tuple[int, int]
    annotations: tuple[LesionAnnotation, ...]
    mask: np.ndarray | None


def _rot90_rect(a: LesionAnnotation, width: int) -> LesionAnnotation:
    # np.rot90 (counter-clockwise): pixel (x, y) -> (y, width - 1 - x)
    return LesionAnnotation(a.cls, a.y, width - (a.x + a.w), a.h, a.w)


def _shift(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def augment(
    image: np.ndarray,
    label: tuple[int, int],
    ops: Sequence[tuple],
    annotations: Sequence[LesionAnnotation] = (),
    mask: np.ndarray | None = None,
    stride: int | None = None,
) -> Augmented:
    """Apply ops in order. Each op is ("rot90", k), ("hflip",), ("vflip",) or ("shift", dx, dy).

    Shifts fill exposed borders with 0 and must stay below the grid stride.
    """
    anns = list(annotations)
    for op in ops:
        name = op[0]
        h, w = image.shape
        if name == "rot90":
            k = int(op[1]) % 4
            for _ in range(k):
                anns = [_rot90_rect(a, image.shape[1]) for a in anns]
                image = np.rot90(image)
                mask = None if mask is None else np.rot90(mask)
        elif name == "hflip":
            image = image[:, ::-1]
            mask = None if mask is None else mask[:, ::-1]
            anns = [LesionAnnotation(a.cls, w - a.x - a.w, a.y, a.w, a.h) for a in anns]
        elif name == "vflip":
            image = image[::-1, :]
            mask = None if mask is None else mask[::-1, :]
            anns = [LesionAnnotation(a.cls, a.x, h - a.y - a.h, a.w, a.h) for a in anns]
        elif name == "shift":
            dx, dy = int(op[1]), int(op[2])
            if stride is None:
                raise ValueError("shift augmentation needs the grid stride")
            if abs(dx) >= stride or abs(dy) >= stride:
                raise ValueError(f"shift ({dx}, {dy}) must be smaller than stride {stride}")
            image = _shift(image, dx, dy)
            mask = None if mask is None else _shift(mask, dx, dy)
            moved = []
            for a in anns:
                x0, y0 = max(0, a.x + dx), max(0, a.y + dy)
                x1, y1 = min(w, a.x + dx + a.w), min(h, a.y + dy + a.h)
                if x1 > x0 and y1 > y0:
                    moved.append(LesionAnnotation(a.cls, x0, y0, x1 - x0, y1 - y0))
            anns = moved
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
    return Augmented(np.ascontiguousarray(image), tuple(label), tuple(anns),
                     None if mask is None else np.ascontiguousarray(mask))


def augmentation_menu(stride: int) -> list[tuple[tuple, ...]]:
    """The fixed op sets drawn from during training (identity first)."""
    half = stride // 2
    return [
        (),
        (("rot90", 1),),
        (("rot90", 2),),
        (("rot90", 3),),
        (("hflip",),),
        (("vflip",),),
        (("rot90", 1), ("hflip",)),
        (("rot90", 1), ("vflip",)),
        (("shift", half, 0),),
        (("shift", -half, 0),),
        (("shift", 0, half),),
        (("shift", 0, -half),),
    ]


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    patient_fold: dict[str, int]

    def fold_of(self, patient_id: str) -> int:
        return self.patient_fold[patient_id]

    def patients_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.patient_fold.items() if f == fold)

    def image_ids(self, manifest: DatasetManifest, fold: int, held_out: bool = True) -> list[str]:
        return [e.image_id for e in manifest
                if (self.patient_fold[e.patient_id] == fold) == held_out]

    def digest(self) -> str:
        import hashlib
        text = json.dumps(self.patient_fold, sort_keys=True)
        return hashlib.sha256(f"{self.n_folds}:{text}".encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"n_folds": self.n_folds, "patient_fold": dict(sorted(self.patient_fold.items()))}

    @classmethod
    def from_json(cls, obj: dict) -> "FoldAssignment":
        return cls(int(obj["n_folds"]), {str(k): int(v) for k, v in obj["patient_fold"].items()})


def split_folds(manifest: DatasetManifest, n_folds: int, seed: int) -> FoldAssignment:
    """Shuffle patients by seed and deal them round-robin into folds."""
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    patients = manifest.patients
    if len(patients) < n_folds:
        raise DataError(f"{len(patients)} patients cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    return FoldAssignment(n_folds, {patients[j]: pos % n_folds for pos, j in enumerate(order)})
