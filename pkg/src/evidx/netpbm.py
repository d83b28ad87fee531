"""Binary NetPBM (P5 grayscale, P6 color) readers and writers, 8-bit only."""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, ParameterError


def _quantize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0 or values.max() > 1 or not np.isfinite(values).all()):
        raise ParameterError("pixel values must lie in [0, 1]")
    return np.floor(values * 255 + 0.5).astype(np.uint8)


def encode(values: np.ndarray, comment: str = "") -> bytes:
    """(H, W) -> P5 bytes, (3, H, W) -> P6 bytes; ``comment`` becomes a ``#`` header line."""
    values = np.asarray(values)
    if values.ndim == 2:
        magic, payload = b"P5", _quantize(values)
        h, w = values.shape
    elif values.ndim == 3 and values.shape[0] == 3:
        magic, payload = b"P6", _quantize(values).transpose(1, 2, 0)
        h, w = values.shape[1:]
    else:
        raise ParameterError(f"expected (H, W) or (3, H, W) array, got {values.shape}")
    if "\n" in comment or "\r" in comment:
        raise ParameterError("header comment must be a single line")
    note = b"# " + comment.encode("ascii") + b"\n" if comment else b""
    return magic + b"\n" + note + b"%d %d\n255\n" % (w, h) + np.ascontiguousarray(payload).tobytes()


def decode(blob: bytes) -> np.ndarray:
    """Parse a P5/P6 byte string into float values in [0, 1]."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        # skip whitespace and comments
        while pos < len(blob) and (blob[pos : pos + 1].isspace() or blob[pos : pos + 1] == b"#"):
            if blob[pos : pos + 1] == b"#":
                end = blob.find(b"\n", pos)
                pos = len(blob) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"truncated header at byte offset {pos}")
        tokens.append((blob[start:pos], start))
    (magic, _), (w_tok, w_at), (h_tok, h_at), (max_tok, max_at) = tokens
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at byte offset 0, expected b'P5' or b'P6'")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise FormatError(f"malformed header field near byte offset {w_at}") from None
    if width < 1 or height < 1:
        raise FormatError(f"invalid image size {width}x{height} at byte offset {w_at}")
    if maxval != 255:
        raise FormatError(f"only 8-bit files are supported, max value {maxval} at byte offset {max_at}")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload at byte offset {pos + len(payload)}: expected {need} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return arr.reshape(height, width, 3).transpose(2, 0, 1).copy()
    return arr.reshape(height, width)


def write_ppm(path: os.PathLike, image: np.ndarray, comment: str = "") -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ParameterError(f"write_ppm expects a (3, H, W) array, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(encode(image, comment))


def write_pgm(path: os.PathLike, mask: np.ndarray, comment: str = "") -> None:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ParameterError(f"write_pgm expects an (H, W) array, got {mask.shape}")
    with open(path, "wb") as fh:
        fh.write(encode(mask, comment))


def read_ppm(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode(fh.read())
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a P6 file, found P5")
    return arr


def read_pgm(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode(fh.read())
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a P5 file, found P6")
    return arr
