"""Small on-disk formats: binary PPM images and DMAP float maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

DMAP_MAGIC = b"DMAP"


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array with values in [0, 1] as 8-bit binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM image must be (3, H, W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported, maxval={maxval}")
    body = raw[pos + 1:pos + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def write_dmap(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 2:
        raise ValueError(f"DMAP needs a 2-D map, got {values.shape}")
    h, w = values.shape
    header = DMAP_MAGIC + np.array([h, w], dtype="<u4").tobytes()
    Path(path).write_bytes(header + np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {DMAP_MAGIC!r}")
    h, w = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=4))
    if len(raw) != 12 + 4 * h * w:
        raise ValueError(f"{path}: expected {12 + 4 * h * w} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", count=h * w, offset=12).reshape(h, w).copy()


def heat_image(values: np.ndarray) -> np.ndarray:
    """Linear gray ramp normalised by the maximum; an all-zero map stays black."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    gray = values / peak if peak > 0 else np.zeros_like(values)
    return np.repeat(gray[None], 3, axis=0)
