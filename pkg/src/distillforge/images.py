"""Tiny image I/O helpers: 8-bit PNG for inspection, binary PPM for golden files.

Images are float arrays in [0, 1], shape (H, W) or (H, W, 3).
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ConfigurationError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def save_ppm(img: np.ndarray, path) -> None:
    """Binary P6 PPM; grayscale input is replicated to three channels."""
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"PPM needs (H,W) or (H,W,3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ConfigurationError(f"{path}: not a binary P6 PPM")
    # header = magic, width, height, maxval, then a single whitespace byte
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        fields.append(data[start:i])
    i += 1
    w, h, maxval = (int(f) for f in fields)
    arr = np.frombuffer(data[i : i + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / float(maxval)


def load_image(path) -> np.ndarray:
    """Load PNG/PPM into float64 [0,1], shape (H, W, 3)."""
    p = str(path)
    if p.endswith(".ppm"):
        return load_ppm(p)
    arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
    return arr
