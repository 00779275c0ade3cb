"""Binary PPM (P6) / PGM (P5) codec with 8-bit samples."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    vals = []
    pos = 2
    n = len(data)
    while len(vals) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header")
        vals.append(int(data[start:pos]))
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    return vals, pos + 1


def decode(data: bytes, channels: int | None = None) -> np.ndarray:
    """Decode P5/P6 bytes to an ``H x W x C`` float array in [0, 1].

    ``channels=3`` replicates a grayscale image across three channels.
    """
    magic = data[:2]
    if magic == b"P6":
        c = 3
    elif magic == b"P5":
        c = 1
    else:
        raise ImageFormatError(f"bad magic {magic!r}; expected P5 or P6")
    (w, h, maxval), start = _tokens(data, 3)
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported; only 255")
    need = w * h * c
    payload = data[start : start + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {need} bytes")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c) / 255.0
    if channels is not None and channels != c:
        if c == 1:
            img = np.repeat(img, channels, axis=2)
        else:
            raise ImageFormatError(f"cannot convert {c}-channel image to {channels} channels")
    return img


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ImageFormatError(f"can only encode 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def read_image(path, channels: int | None = None) -> np.ndarray:
    return decode(Path(path).read_bytes(), channels)


def write_image(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))
