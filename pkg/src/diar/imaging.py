"""Image container, binary PPM/PGM I/O, bilinear resampling and warping.

Pixel-center convention: pixel (x, y) sits at real coordinates (x, y), so the
valid sampling domain is [0, W-1] x [0, H-1].  Samples outside that domain
return the fill value 0 and are flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PpmParseError(ValueError):
    """Malformed or truncated PPM/PGM file; carries the failing byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Image:
    """Dense H x W x C raster of reals in [0, 1]; C is 1 or 3."""

    data: np.ndarray  # (H, W, C) float64

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"Image requires (H, W, 1|3) data, got {arr.shape}")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n and buf[pos : pos + 1].isspace():
        pos += 1
    if pos >= n:
        raise PpmParseError("unexpected end of header", pos)
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_ppm(path) -> Image:
    """Read a binary P6 (color) or P5 (gray) file with maxval 255."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise PpmParseError(f"unsupported magic {magic!r}", 0)
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PpmParseError(f"non-numeric header token {tok!r}", pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise PpmParseError(f"unsupported maxval {maxval}", pos)
    if width < 1 or height < 1:
        raise PpmParseError(f"bad raster extents {width}x{height}", pos)
    pos += 1  # single whitespace byte after the maxval token
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise PpmParseError(
            f"truncated payload: expected {need} bytes, got {len(payload)}", pos + len(payload)
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(arr.astype(np.float64) / 255.0)


def write_ppm(image: Image, path):
    """Write P6 for 3-channel images, P5 for single-channel; maxval 255."""
    q = np.rint(image.data * 255.0).astype(np.uint8)
    magic = b"P6" if image.channels == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{image.width} {image.height}\n".encode())
        f.write(b"255\n")
        f.write(q.tobytes())


BORDER_EPS = 1e-6  # tolerance for samples a rounding error outside the domain


def _bilinear_grid(data: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Vectorized bilinear sampling; returns (values, valid mask)."""
    h, w = data.shape[:2]
    e = BORDER_EPS
    valid = (xs >= -e) & (xs <= w - 1 + e) & (ys >= -e) & (ys <= h - 1 + e)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    v = (
        data[y0, x0] * (1 - fx) * (1 - fy)
        + data[y0, x1] * fx * (1 - fy)
        + data[y1, x0] * (1 - fx) * fy
        + data[y1, x1] * fx * fy
    )
    v[~valid] = 0.0
    return v, valid


def bilinear_sample(image: Image, x: float, y: float):
    """Sample one pixel; returns (value array of len C, in_bounds flag)."""
    v, valid = _bilinear_grid(image.data, np.asarray([x], dtype=np.float64), np.asarray([y], dtype=np.float64))
    return v[0], bool(valid[0])


def warp(image: Image, h, out_h: int, out_w: int):
    """Pull-warp: output pixel (x, y) samples the input at h(x, y).

    Returns (Image, validity mask) where the mask marks output pixels whose
    source coordinate fell inside the input domain.
    """
    from .geometry import Homography  # local import to avoid a cycle

    if isinstance(h, Homography):
        m = h.m
    else:
        m = np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(m)) < 1e-12:
        raise ValueError("warp: homography is singular")
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    denom = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / denom
        sy = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / denom
    bad = ~np.isfinite(sx) | ~np.isfinite(sy)
    sx[bad] = -1.0
    sy[bad] = -1.0
    values, valid = _bilinear_grid(image.data, sx, sy)
    return Image(values), valid


def resize(image: Image, scale: float) -> Image:
    """Bilinear resize by a positive real factor."""
    if scale <= 0:
        raise ValueError("resize: scale must be positive")
    out_h = int(round(image.height * scale))
    out_w = int(round(image.width * scale))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize: degenerate output size {out_h}x{out_w}")
    return resize_to(image, out_h, out_w)


def resize_to(image: Image, out_h: int, out_w: int) -> Image:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize_to: degenerate output size {out_h}x{out_w}")
    if out_h == image.height and out_w == image.width:
        return Image(image.data.copy())
    xs = np.linspace(0.0, image.width - 1.0, out_w)
    ys = np.linspace(0.0, image.height - 1.0, out_h)
    gx, gy = np.meshgrid(xs, ys)
    values, _ = _bilinear_grid(image.data, gx, gy)
    return Image(values)


def resize_coord_factors(image: Image, scale: float) -> tuple[float, float]:
    """(x, y) factors mapping resized-image coordinates back to the original."""
    out_h = int(round(image.height * scale))
    out_w = int(round(image.width * scale))
    fx = (image.width - 1.0) / (out_w - 1.0) if out_w > 1 else 0.0
    fy = (image.height - 1.0) / (out_h - 1.0) if out_h > 1 else 0.0
    return fx, fy
