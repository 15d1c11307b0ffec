"""Grayscale PGM / color PPM reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit binary PGM as float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.format not in ("PPM", None):
            raise ValueError(f"{path}: not a PGM file ({im.format})")
        arr = np.array(im)
        mode = im.mode
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-channel image, got shape {arr.shape}")
    maxval = 255.0 if mode in ("L", "1") else 65535.0
    return arr.astype(np.float64) / maxval


def write_pgm(path: str | Path, image: np.ndarray, bits: int = 16) -> None:
    """Write a [0, 1] float image as binary PGM (P5)."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = 255 if bits == 8 else 65535
    q = np.round(np.clip(image, 0.0, 1.0) * top)
    q = q.astype(np.uint8 if bits == 8 else np.uint16)
    Image.fromarray(q).save(path, format="PPM")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PPM")


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-channel mask")
    return arr != 0


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an H x W x 3 array")
    Image.fromarray(rgb.astype(np.uint8)).save(path, format="PPM")
