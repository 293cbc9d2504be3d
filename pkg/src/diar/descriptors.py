"""Dense per-pixel descriptor maps and multi-scale keypoint matrices.

Two providers are available: a training-free normalized-patch descriptor
(every pixel described by its mean-subtracted k x k neighborhood) and a small
strided convolutional encoder whose weights are loaded from a checkpoint
(random weights are usable for coarse matching).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Image, resize, resize_coord_factors
from .tensor import ParamStore

# fixed descriptor-encoder architecture: 3 stride-2 conv blocks
CNN_CHANNELS = [3, 16, 32, 64]
CNN_KERNEL = 5
CNN_SCALE = 8.0
CNN_OFFSET = 3.5


@dataclass
class FeatureMap:
    """Dense descriptor grid plus the affine map from grid to image coords:
    image_coord = grid_coord * scale + offset."""

    grid: np.ndarray  # (H', W', C)
    scale: float
    offset: tuple[float, float]


@dataclass
class KeypointMatrix:
    """Row-stacked descriptors with their source image coordinates."""

    x: np.ndarray  # (N, C)
    coords: np.ndarray  # (N, 2) as (x, y)


def patch_descriptors(image: Image, k: int = 7) -> FeatureMap:
    """Descriptor at (x, y) = flattened, mean-subtracted k x k neighborhood
    (reflect padding at the border)."""
    if k % 2 == 0:
        raise ValueError("patch_descriptors: k must be odd")
    if k > min(image.height, image.width):
        raise ValueError("patch_descriptors: k exceeds image extents")
    half = k // 2
    padded = np.pad(image.data, ((half, half), (half, half), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, C, k, k)
    grid = win.reshape(image.height, image.width, -1).astype(np.float32)
    grid = grid - grid.mean(axis=2, keepdims=True)
    return FeatureMap(grid, 1.0, (0.0, 0.0))


def init_cnn_descriptor_params(seed: int = 0) -> ParamStore:
    """He-style random weights for the fixed descriptor encoder."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i in range(3):
        c_in, c_out = CNN_CHANNELS[i], CNN_CHANNELS[i + 1]
        fan_in = c_in * CNN_KERNEL * CNN_KERNEL
        bound = np.sqrt(6.0 / fan_in)
        store.add(f"conv{i}.w", rng.uniform(-bound, bound, size=(c_out, c_in, CNN_KERNEL, CNN_KERNEL)))
        store.add(f"conv{i}.b", np.zeros(c_out))
    return store


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Plain numpy strided cross-correlation (no gradients needed here)."""
    from .tensor import _im2col_index

    c_in, h, wid = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    idx, oh, ow = _im2col_index(c_in, h, wid, k, stride, pad)
    cols = xp.reshape(-1)[idx]
    return (w.reshape(c_out, -1) @ cols).reshape(c_out, oh, ow) + b[:, None, None]


def cnn_descriptors(image: Image, weights: ParamStore) -> FeatureMap:
    """Feature grid from the fixed 3-block strided encoder (output stride 8,
    64 channels, receptive-field center offset 3.5)."""
    x = image.data
    if x.shape[2] == 1:
        x = np.repeat(x, 3, axis=2)
    x = np.ascontiguousarray(x.transpose(2, 0, 1))
    for i in range(3):
        wn, bn = f"conv{i}.w", f"conv{i}.b"
        for name in (wn, bn):
            if name not in weights:
                raise ValueError(f"cnn_descriptors: checkpoint missing parameter {name!r}")
        w = weights[wn].data
        b = weights[bn].data
        expect = (CNN_CHANNELS[i + 1], CNN_CHANNELS[i], CNN_KERNEL, CNN_KERNEL)
        if w.shape != expect:
            raise ValueError(f"cnn_descriptors: parameter {wn!r} has shape {w.shape}, expected {expect}")
        x = _conv_forward(x, w, b, stride=2, pad=CNN_KERNEL // 2)
        if i < 2:
            x = np.maximum(x, 0.0)  # final layer stays linear
    grid = x.transpose(1, 2, 0).astype(np.float32)
    # center each channel over the map so cosine scores discriminate
    grid = grid - grid.mean(axis=(0, 1), keepdims=True)
    return FeatureMap(grid, CNN_SCALE, (CNN_OFFSET, CNN_OFFSET))


def flatten_feature_map(fm: FeatureMap, coord_factors=(1.0, 1.0)) -> KeypointMatrix:
    """Flatten a feature grid to rows and map grid cells to image coordinates
    (optionally through resize factors back to the original image)."""
    hh, ww, c = fm.grid.shape
    gy, gx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    xs = (gx * fm.scale + fm.offset[0]) * coord_factors[0]
    ys = (gy * fm.scale + fm.offset[1]) * coord_factors[1]
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return KeypointMatrix(fm.grid.reshape(-1, c), coords)


def pyramid_keypoints(image: Image, scales, provider) -> KeypointMatrix:
    """Descriptors at several image scales, stacked into one matrix with all
    coordinates mapped back to the original image frame."""
    scales = list(scales)
    if not scales:
        raise ValueError("pyramid_keypoints: scales must be non-empty")
    if any(s <= 0 for s in scales):
        raise ValueError("pyramid_keypoints: scales must be positive")
    rows = []
    coords = []
    for s in scales:
        scaled = image if s == 1.0 else resize(image, s)
        fx, fy = resize_coord_factors(image, s)
        km = flatten_feature_map(provider(scaled), (fx, fy))
        rows.append(km.x)
        # clamp away sub-ulp rounding overshoot at the far border
        coords.append(np.clip(km.coords, 0.0, [image.width - 1.0, image.height - 1.0]))
    return KeypointMatrix(np.concatenate(rows, axis=0), np.concatenate(coords, axis=0))
