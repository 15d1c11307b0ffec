"""Synthetic planted-lesion benchmark.

Backgrounds are smooth sums of random cosine waves. Benign lesions are
Gaussian blobs; malignant lesions are blobs with eight thin radial spikes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, LesionAnnotation, ManifestEntry
from .imageio import write_mask, write_pgm

MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class SynthParams:
    size: int = 256
    mix_m: float = 0.3
    mix_b: float = 0.3
    mix_n: float = 0.4
    sigma_range: tuple[float, float] = (5.0, 9.0)
    n_waves: int = 8
    max_freq: float = 4.0
    blob_amplitude: float = 0.3
    spike_amplitude: float = 0.2
    n_spikes: int = 8
    extra_benign_prob: float = 0.3  # malignant images that also carry a benign lesion
    max_benign: int = 2

    def __post_init__(self):
        mix = (self.mix_m, self.mix_b, self.mix_n)
        if min(mix) < 0 or not math.isclose(sum(mix), 1.0, abs_tol=1e-9):
            raise ValueError(f"class mix must be non-negative and sum to 1, got {mix}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError("sigma_range must satisfy 0 < lo <= hi")


def class_quota(n: int, params: SynthParams) -> list[str]:
    """Exact per-class counts by largest remainder, in M, B, N order."""
    fracs = {"M": params.mix_m, "B": params.mix_b, "N": params.mix_n}
    raw = {c: f * n for c, f in fracs.items()}
    counts = {c: int(math.floor(v)) for c, v in raw.items()}
    short = n - sum(counts.values())
    for c in sorted(raw, key=lambda c: (-(raw[c] - counts[c]), "MBN".index(c)))[:short]:
        counts[c] += 1
    return [c for c in "MBN" for _ in range(counts[c])]


def cosine_background(rng: np.random.Generator, size: int, n_waves: int, max_freq: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.zeros((size, size))
    for _ in range(n_waves):
        freq = rng.uniform(0.0, max_freq)
        theta = rng.uniform(0.0, 2 * np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.2, 1.0)
        bg += amp * np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    lo, hi = bg.min(), bg.max()
    if hi - lo < 1e-12:
        return np.full((size, size), 0.4)
    return 0.2 + 0.4 * (bg - lo) / (hi - lo)


def _blob(size: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))


def _spikes(size: int, cx: float, cy: float, length: float, n: int, angle0: float) -> np.ndarray:
    out = np.zeros((size, size))
    steps = np.arange(0.0, length + 1e-9, 0.5)
    for j in range(n):
        ang = angle0 + 2 * np.pi * j / n
        px = np.rint(cx + steps * np.cos(ang)).astype(int)
        py = np.rint(cy + steps * np.sin(ang)).astype(int)
        ok = (px >= 0) & (px < size) & (py >= 0) & (py < size)
        out[py[ok], px[ok]] = 1.0
    return out


def _lesion_rect(cls: str, cx: float, cy: float, sigma: float) -> tuple[int, int, int, int]:
    r = (3.0 if cls == "M" else 2.0) * sigma
    x0, y0 = math.floor(cx - r), math.floor(cy - r)
    x1, y1 = math.ceil(cx + r) + 1, math.ceil(cy + r) + 1
    return x0, y0, x1 - x0, y1 - y0


def _overlaps(a, b) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def _render(rng: np.random.Generator, severity: str, params: SynthParams):
    size = params.size
    image = cosine_background(rng, size, params.n_waves, params.max_freq)
    if severity == "M":
        wanted = ["M"] + (["B"] if rng.random() < params.extra_benign_prob else [])
    elif severity == "B":
        wanted = ["B"] * int(rng.integers(1, params.max_benign + 1))
    else:
        wanted = []

    placed: list[LesionAnnotation] = []
    for cls in wanted:
        for _ in range(MAX_PLACEMENT_TRIES):
            sigma = rng.uniform(*params.sigma_range)
            cx, cy = rng.uniform(0, size, 2)
            rect = _lesion_rect(cls, cx, cy, sigma)
            x, y, w, h = rect
            inside = x >= 0 and y >= 0 and x + w <= size and y + h <= size
            if inside and not any(_overlaps(rect, p.rect) for p in placed):
                break
        else:
            return None
        image = image + params.blob_amplitude * _blob(size, cx, cy, sigma)
        if cls == "M":
            rays = _spikes(size, cx, cy, 3 * sigma, params.n_spikes, rng.uniform(0, 2 * np.pi))
            image = image + params.spike_amplitude * rays
        placed.append(LesionAnnotation(cls, *rect))
    return np.clip(image, 0.0, 1.0), tuple(placed)


def synth_image(seed: int, index: int, severity: str, params: SynthParams):
    """Render one image; placement failures regenerate with an incremented sub-seed."""
    sub = 0
    while True:
        rng = np.random.default_rng([seed, index, sub])
        out = _render(rng, severity, params)
        if out is not None:
            return out
        sub += 1


def synth_generate(seed: int, n_images: int, params: SynthParams, out_dir: str | Path) -> DatasetManifest:
    """Write images, full foreground masks and manifest.jsonl under out_dir."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    classes = class_quota(n_images, params)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n_images)
    classes = [classes[i] for i in order]

    mask_path = out_dir / "masks" / "full.pgm"
    write_mask(mask_path, np.ones((params.size, params.size), dtype=bool))
    entries = []
    width = max(4, len(str(n_images - 1)))
    for i, severity in enumerate(classes):
        image, anns = synth_image(seed, i, severity, params)
        image_id = f"syn{i:0{width}d}"
        path = out_dir / "images" / f"{image_id}.pgm"
        write_pgm(path, image, bits=16)
        y_m = int(any(a.cls == "M" for a in anns))
        y_b = int(any(a.cls == "B" for a in anns))
        entries.append(ManifestEntry(image_id, image_id, path.resolve(), y_m, y_b,
                                     mask_path.resolve(), anns))
    manifest = DatasetManifest(entries, root=out_dir.resolve())
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
