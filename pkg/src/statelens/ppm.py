"""Binary PPM (P6) and PBM (P4) raster io."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError("PPM writer needs a (H,W,3) uint8 array")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _read_tokens(fh, count):
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise ValidationError("truncated PNM header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValidationError(f"{path}: not a binary PPM (magic {magic!r})")
        w, h, maxval = (int(t) for t in _read_tokens(fh, 3))
        if maxval != 255:
            raise ValidationError(f"{path}: unsupported maxval {maxval}")
        payload = fh.read(w * h * 3)
    if len(payload) != w * h * 3:
        raise ValidationError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pbm(path, mask: np.ndarray) -> None:
    """P4 bitmap; by convention 1 = marked pixel."""
    if mask.ndim != 2:
        raise ValidationError("PBM writer needs a (H,W) boolean array")
    h, w = mask.shape
    packed = np.packbits(mask.astype(np.uint8), axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode("ascii"))
        fh.write(packed.tobytes())


def read_pbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P4":
            raise ValidationError(f"{path}: not a binary PBM (magic {magic!r})")
        w, h = (int(t) for t in _read_tokens(fh, 2))
        payload = fh.read()
    row_bytes = (w + 7) // 8
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8).reshape(h, row_bytes), axis=1)
    return bits[:, :w].astype(bool)
