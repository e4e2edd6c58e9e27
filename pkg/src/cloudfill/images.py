"""Depth / silhouette image file formats: PFM (float depth), PGM (binary
masks), and optional PNG previews."""

from __future__ import annotations

import numpy as np


class ImageIOError(Exception):
    pass


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows stored bottom-to-top per the
    format convention."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ImageIOError(f"PFM writer expects a 2-D array, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ImageIOError(f"{path}: expected single-channel PFM magic 'Pf', got {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ImageIOError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype)
        if data.size != w * h:
            raise ImageIOError(f"{path}: truncated PFM payload ({data.size} of {w * h} values)")
    return np.flipud(data.reshape(h, w)).astype(np.float32)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5, maxval 255) grayscale image from values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ImageIOError(f"PGM writer expects a 2-D array, got shape {image.shape}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM back to floats in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ImageIOError(f"{path}: expected binary PGM magic 'P5', got {magic!r}")
        tokens: list = []
        while len(tokens) < 3:
            line = f.readline()
            if not line:
                raise ImageIOError(f"{path}: truncated PGM header")
            text = line.split(b"#")[0]
            tokens.extend(text.split())
        w, h, maxval = (int(t) for t in tokens[:3])
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
        if data.size != w * h:
            raise ImageIOError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float32) / float(maxval)


def write_png_preview(path, image: np.ndarray) -> None:
    """8-bit grayscale PNG for quick inspection; scales the image to its
    own min/max range."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    data = np.clip((image - lo) / span * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)
