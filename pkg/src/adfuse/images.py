"""Portable raster I/O and small image helpers.

Images are binary PPM (P6, 8-bit RGB); masks are binary PGM (P5, 8-bit
single channel, 0/255). Writers emit a fixed header layout so identical
arrays give identical bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import DataIOError, InvalidShapeError


def write_ppm(path, rgb: np.ndarray):
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise InvalidShapeError(f"write_ppm needs (H,W,3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (w, h))
            f.write(np.ascontiguousarray(rgb).tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write image {path}: {e}") from e


def write_pgm(path, gray: np.ndarray):
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise InvalidShapeError(f"write_pgm needs (H,W) uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    try:
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (w, h))
            f.write(np.ascontiguousarray(gray).tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write mask {path}: {e}") from e


def _read_header(f, path):
    magic = f.readline().strip()
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise DataIOError(f"truncated netpbm header in {path}")
        text = line.split(b"#", 1)[0]
        fields += text.split()
    w, h, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise DataIOError(f"{path}: only 8-bit rasters supported, maxval {maxval}")
    return magic, w, h


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            magic, w, h = _read_header(f, path)
            if magic != b"P6":
                raise DataIOError(f"{path}: expected P6, got {magic!r}")
            data = f.read(w * h * 3)
    except OSError as e:
        raise DataIOError(f"cannot read image {path}: {e}") from e
    if len(data) != w * h * 3:
        raise DataIOError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            magic, w, h = _read_header(f, path)
            if magic != b"P5":
                raise DataIOError(f"{path}: expected P5, got {magic!r}")
            data = f.read(w * h)
    except OSError as e:
        raise DataIOError(f"cannot read mask {path}: {e}") from e
    if len(data) != w * h:
        raise DataIOError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# conversions


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1]."""
    return img.astype(np.float32) / 255.0


def to_model_range(img: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1]."""
    return img.astype(np.float32) / 127.5 - 1.0


def from_model_range(arr: np.ndarray) -> np.ndarray:
    """float [-1, 1] (clipped) -> uint8."""
    return np.clip((arr + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)


def chw(img: np.ndarray) -> np.ndarray:
    """(H,W,3) -> (3,H,W)."""
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def hwc(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(arr, 0, -1))


def downsample_area(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-average an (H,W) or (H,W,C) float array by an integer factor."""
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise InvalidShapeError(f"size {h}x{w} not divisible by factor {factor}")
    if img.ndim == 2:
        return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize for (H,W) or (H,W,C) arrays."""
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return img[rows][:, cols]


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (H,W,3) float array."""
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
