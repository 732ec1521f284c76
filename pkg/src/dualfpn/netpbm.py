"""Binary PGM (P5) and PPM (P6) readers/writers, maxval 255.

No codec dependencies: these two formats cover everything the toolkit emits
(grayscale feature-map exports and RGB dataset images).
"""

from __future__ import annotations

import numpy as np


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {gray.shape}")
    _write(path, b"P5", gray)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 array, got shape {rgb.shape}")
    _write(path, b"P6", rgb)


def _tokens(raw: bytes):
    """Header tokens, skipping whitespace and # comments."""
    i = 0
    while True:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated netpbm header")
        yield raw[start:i], i


def read_netpbm(path) -> np.ndarray:
    """Returns HxW uint8 for P5, HxWx3 uint8 for P6."""
    raw = open(path, "rb").read()
    toks = _tokens(raw)
    magic, _ = next(toks)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    (w, _), (h, _), (maxval, end) = next(toks), next(toks), next(toks)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    depth = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, offset=end + 1, count=h * w * depth)
    if data.size != h * w * depth:
        raise ValueError("truncated pixel data")
    arr = data.reshape((h, w, 3) if depth == 3 else (h, w))
    return arr.copy()
