"""8-bit image files: PNG, binary PPM (P6) and binary PGM (P5), via Pillow.

The format follows the file extension. RGB arrays are (H, W, 3) and
grayscale arrays are (H, W), both ``uint8``.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import InputError, LoadError, ShapeError

FORMATS = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM"}


def _format_for(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return FORMATS[ext]
    except KeyError:
        raise InputError(f"unsupported image extension {ext!r} (use .png, .ppm or .pgm)") from None


def write_image(path, image) -> None:
    fmt = _format_for(path)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ShapeError(f"expected uint8 pixels, got {image.dtype}")
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        mode = "L"
    elif image.ndim == 3 and image.shape[2] == 3:
        mode = "RGB"
    else:
        raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {image.shape}")
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm" and mode != "RGB":
        raise ShapeError("PPM holds RGB images; use .pgm for grayscale")
    if ext == ".pgm" and mode != "L":
        raise ShapeError("PGM holds grayscale images; use .ppm for RGB")
    Image.fromarray(image, mode).save(path, format=fmt)


def read_image(path) -> np.ndarray:
    """Load an image as uint8; grayscale files come back as (H, W)."""
    _format_for(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Boolean mask from an image file; pixels above 127 are set."""
    img = read_image(path)
    if img.ndim == 3:
        img = img.max(axis=2)
    return img > 127


def write_mask(path, mask) -> None:
    write_image(path, np.asarray(mask, bool).astype(np.uint8) * 255)
