"""PFM image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def write_pfm(path, image) -> None:
    """Greyscale PFM, little-endian float32, rows stored bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            return tok
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = _read_token(fh)
            if magic != b"Pf":
                raise FormatError(f"{path}: not a greyscale PFM (magic {magic!r})")
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            scale = float(_read_token(fh))
            data = fh.read()
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} bytes of pixels, found {len(data)}")
    img = np.frombuffer(data, dtype=dtype).reshape(h, w)[::-1]
    return img.astype(np.float32)
