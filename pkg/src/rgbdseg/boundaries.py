"""Boundary-probability maps for color and depth channels, and their fusion.

The trained contour detector is substituted by multi-scale oriented
Gaussian-derivative gradients normalized by the 99th percentile. Fusion is
the per-pixel maximum of the two channel maps, so the pairwise penalty
exp(-max(B(x), B(y)) / sigma^2) reproduces the augmented boundary penalty
on the fused map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import DimensionMismatchError, ImageFormatError

BLUR_SCALES = (1.0, 2.0)
N_ORIENTATIONS = 4
NORM_PERCENTILE = 99.0


@dataclass(frozen=True)
class BoundaryMap:
    values: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("boundary map must be 2-D")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("boundary values must lie in [0,1]")

    @property
    def shape(self):
        return self.values.shape


def gaussian_kernel1d(sigma: float, order: int) -> np.ndarray:
    """Sampled Gaussian (order 0) or its first derivative (order 1).

    The smoothing kernel is normalized to unit sum; the derivative kernel is
    -x/sigma^2 times the normalized Gaussian, so responses approximate the
    analytic derivative of the blurred signal.
    """
    radius = max(1, int(round(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    if order == 0:
        return g
    if order == 1:
        return -x / sigma**2 * g
    raise ValueError(f"unsupported order {order}")


def oriented_gradients(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Max over N_ORIENTATIONS of |directional Gaussian derivative|."""
    channel = np.asarray(channel, dtype=np.float64)
    smooth = gaussian_kernel1d(sigma, 0)
    deriv = gaussian_kernel1d(sigma, 1)
    gx = ndimage.correlate1d(channel, smooth, axis=0, mode="nearest")
    gx = ndimage.correlate1d(gx, deriv, axis=1, mode="nearest")
    gy = ndimage.correlate1d(channel, smooth, axis=1, mode="nearest")
    gy = ndimage.correlate1d(gy, deriv, axis=0, mode="nearest")
    out = np.zeros_like(channel)
    for k in range(N_ORIENTATIONS):
        theta = k * np.pi / N_ORIENTATIONS
        np.maximum(out, np.abs(np.cos(theta) * gx + np.sin(theta) * gy), out=out)
    return out


def estimate_boundaries(channel: np.ndarray) -> BoundaryMap:
    """Multi-scale oriented gradient magnitude, 99th-percentile normalized."""
    channel = np.asarray(channel, dtype=np.float64)
    response = np.zeros(channel.shape, dtype=np.float64)
    for sigma in BLUR_SCALES:
        np.maximum(response, oriented_gradients(channel, sigma), out=response)
    scale = np.percentile(response, NORM_PERCENTILE)
    if scale > 0:
        response = response / scale
    return BoundaryMap(np.clip(response, 0.0, 1.0))


def fuse_boundaries(rgb_map: BoundaryMap, depth_map: BoundaryMap) -> BoundaryMap:
    if rgb_map.shape != depth_map.shape:
        raise DimensionMismatchError(
            f"boundary shapes differ: {rgb_map.shape} vs {depth_map.shape}"
        )
    return BoundaryMap(np.maximum(rgb_map.values, depth_map.values))


def color_boundaries(rgb: np.ndarray) -> BoundaryMap:
    """Per-channel boundary estimates fused by max.

    Luminance alone misses chromatic edges (e.g. cyan on gray); running the
    estimator on each channel keeps them.
    """
    fused = estimate_boundaries(rgb[..., 0])
    for c in (1, 2):
        fused = fuse_boundaries(fused, estimate_boundaries(rgb[..., c]))
    return fused


def frame_boundaries(frame, use_depth: bool = True) -> BoundaryMap:
    """The pipeline's fused map: color boundaries, optionally max-fused with
    the metric-depth boundary map."""
    fused = color_boundaries(frame.rgb)
    if use_depth:
        fused = fuse_boundaries(fused, estimate_boundaries(frame.depth))
    return fused


def pairwise_penalty(bmap: BoundaryMap, x, y, sigma: float) -> float:
    """exp(-max(B(x), B(y)) / sigma^2) for two pixels given as (col, row)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    h, w = bmap.shape
    for (cx, cy) in (x, y):
        if not (0 <= cx < w and 0 <= cy < h):
            raise IndexError(f"pixel {(cx, cy)} outside {w}x{h} map")
    b = max(bmap.values[x[1], x[0]], bmap.values[y[1], y[0]])
    return float(np.exp(-b / sigma**2))


def edge_penalties(bmap: BoundaryMap, sigma: float):
    """Vectorized pairwise_penalty over the 4-neighborhood.

    Returns (w_right, w_down): w_right[y, x] is the penalty between (x, y)
    and (x+1, y) with a zero last column; w_down likewise for (x, y+1).
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    v = bmap.values
    h, w = v.shape
    w_right = np.zeros((h, w), dtype=np.float64)
    w_down = np.zeros((h, w), dtype=np.float64)
    w_right[:, : w - 1] = np.exp(-np.maximum(v[:, :-1], v[:, 1:]) / sigma**2)
    w_down[: h - 1, :] = np.exp(-np.maximum(v[:-1, :], v[1:, :]) / sigma**2)
    return w_right, w_down


_MAP_HEADER = struct.Struct("<III")


def write_boundary_map(path, bmap: BoundaryMap) -> None:
    """12-byte header (width, height, 1 as u32 LE) + row-major float32 LE."""
    h, w = bmap.shape
    with open(path, "wb") as fh:
        fh.write(_MAP_HEADER.pack(w, h, 1))
        fh.write(bmap.values.astype("<f4").tobytes())


def read_boundary_map(path) -> BoundaryMap:
    with open(path, "rb") as fh:
        header = fh.read(_MAP_HEADER.size)
        if len(header) != _MAP_HEADER.size:
            raise ImageFormatError(f"{path}: truncated boundary-map header")
        w, h, channels = _MAP_HEADER.unpack(header)
        if channels != 1:
            raise ImageFormatError(f"{path}: expected 1 channel, got {channels}")
        raw = fh.read(w * h * 4)
    if len(raw) != w * h * 4:
        raise ImageFormatError(f"{path}: truncated boundary-map data")
    values = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
    return BoundaryMap(np.clip(values, 0.0, 1.0))
