"""RGB-D frames, point clouds, binary masks, and their file formats.

Depth is stored in meters internally; depth files are 16-bit PGM in integer
millimeters. Invalid depth is the 0 sentinel and is skipped by every
consumer. Masks round-trip through binary PBM (P4) bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or unsupported netpbm content."""


class DimensionMismatchError(ValueError):
    """Two grids that must share a shape do not."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        values = [float(tok) for tok in open(path).read().split()]
        if len(values) != 4:
            raise ImageFormatError(f"{path}: expected 4 values 'fx fy cx cy'")
        return cls(*values)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r}\n")


class RgbdFrame:
    """Registered color + metric depth pair over one pixel grid."""

    def __init__(self, rgb, depth, intrinsics=None):
        rgb = np.asarray(rgb, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be HxWx3")
        if depth.shape != rgb.shape[:2]:
            raise DimensionMismatchError(
                f"rgb is {rgb.shape[1]}x{rgb.shape[0]}, depth is "
                f"{depth.shape[1]}x{depth.shape[0]}"
            )
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError("rgb values must lie in [0,1]")
        if depth.min() < 0.0:
            raise ValueError("depth values must be >= 0")
        rgb.setflags(write=False)
        depth.setflags(write=False)
        self.rgb = rgb
        self.depth = depth
        self.intrinsics = intrinsics

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def gray(self):
        """Channel mean as a single luminance plane."""
        return self.rgb.mean(axis=2)

    def valid_depth(self):
        return self.depth > 0.0


@dataclass(frozen=True)
class PointCloud:
    """One 3D point per valid-depth pixel, with the source pixel recorded."""

    points: np.ndarray       # (N, 3) meters
    pixel_index: np.ndarray  # (N,) flat row-major pixel index

    def __len__(self) -> int:
        return self.points.shape[0]


class SegmentMask:
    """Binary region mask with cached area and tight bounding box."""

    __slots__ = ("bits", "area", "bbox", "_packed")

    def __init__(self, bits):
        bits = np.ascontiguousarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("mask bits must be 2-D")
        bits.setflags(write=False)
        self.bits = bits
        self.area = int(bits.sum())
        if self.area:
            ys, xs = np.nonzero(bits)
            self.bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        else:
            self.bbox = (0, 0, -1, -1)
        self._packed = None

    @property
    def shape(self):
        return self.bits.shape

    def packed(self):
        """Bit-packed rows for fast popcount arithmetic; lazily cached."""
        if self._packed is None:
            self._packed = np.packbits(self.bits.reshape(-1))
        return self._packed

    def __eq__(self, other):
        if not isinstance(other, SegmentMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(
            np.array_equal(self.bits, other.bits)
        )

    def __hash__(self):
        return hash((self.bits.shape, self.packed().tobytes()))

    def __repr__(self):
        h, w = self.bits.shape
        return f"SegmentMask({w}x{h}, area={self.area})"


def mask_iou(a: SegmentMask, b: SegmentMask) -> float:
    """Intersection over union; 0 by definition when both masks are empty."""
    if a.bits.shape != b.bits.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.bitwise_count(a.packed() & b.packed()).sum())
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def backproject(frame: RgbdFrame) -> PointCloud:
    """Pinhole back-projection of all valid-depth pixels into camera space."""
    if frame.intrinsics is None:
        raise ValueError("frame has no intrinsics")
    k = frame.intrinsics
    valid = frame.valid_depth()
    vs, us = np.nonzero(valid)
    z = frame.depth[vs, us]
    x = (us - k.cx) * z / k.fx
    y = (vs - k.cy) * z / k.fy
    points = np.column_stack([x, y, z])
    return PointCloud(points=points, pixel_index=vs * frame.width + us)


def load_frame(color_path, depth_path, intrinsics=None) -> RgbdFrame:
    """Read a P6 color image and a 16-bit P5 millimeter depth image.

    `intrinsics` may be a CameraIntrinsics, a path to a text file holding
    `fx fy cx cy`, or None.
    """
    rgb8 = read_ppm(color_path)
    depth_mm = read_pgm16(depth_path)
    if depth_mm.shape != rgb8.shape[:2]:
        raise DimensionMismatchError(
            f"{color_path} is {rgb8.shape[1]}x{rgb8.shape[0]} but {depth_path} "
            f"is {depth_mm.shape[1]}x{depth_mm.shape[0]}"
        )
    if intrinsics is not None and not isinstance(intrinsics, CameraIntrinsics):
        intrinsics = CameraIntrinsics.load(intrinsics)
    return RgbdFrame(
        rgb=rgb8.astype(np.float64) / 255.0,
        depth=depth_mm.astype(np.float64) / 1000.0,
        intrinsics=intrinsics,
    )


# -- netpbm ------------------------------------------------------------------

def _read_pnm_header(fh, magic):
    got = fh.read(2)
    if got != magic:
        raise ImageFormatError(f"expected {magic.decode()} file, got {got!r}")
    fields = []
    needed = 2 if magic == b"P4" else 3
    while len(fields) < needed:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed header token {tok!r}")
        fields.append(int(tok))
    return fields


def read_ppm(path):
    """P6 with 8-bit samples -> (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        width, height, maxval = _read_pnm_header(fh, b"P6")
        if maxval != 255:
            raise ImageFormatError(f"{path}: unsupported maxval {maxval} (need 255)")
        raw = fh.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path, rgb8):
    rgb8 = np.ascontiguousarray(rgb8, dtype=np.uint8)
    height, width = rgb8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(rgb8.tobytes())


def read_pgm16(path):
    """P5 with 16-bit big-endian samples -> (H, W) uint16."""
    with open(path, "rb") as fh:
        width, height, maxval = _read_pnm_header(fh, b"P5")
        if not 256 <= maxval <= 65535:
            raise ImageFormatError(
                f"{path}: unsupported bit depth (maxval {maxval}, need 16-bit)"
            )
        raw = fh.read(width * height * 2)
    if len(raw) != width * height * 2:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=">u2").reshape(height, width).astype(np.uint16)


def write_pgm16(path, values):
    values = np.ascontiguousarray(values, dtype=np.uint16)
    height, width = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n65535\n".encode())
        fh.write(values.astype(">u2").tobytes())


def read_pbm(path) -> SegmentMask:
    """P4 bitmap -> SegmentMask (1 bits are foreground)."""
    with open(path, "rb") as fh:
        width, height = _read_pnm_header(fh, b"P4")
        row_bytes = (width + 7) // 8
        raw = fh.read(row_bytes * height)
    if len(raw) != row_bytes * height:
        raise ImageFormatError(f"{path}: truncated bitmap data")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(height, row_bytes)
    bits = np.unpackbits(rows, axis=1)[:, :width].astype(bool)
    return SegmentMask(bits)


def write_pbm(path, mask: SegmentMask) -> None:
    height, width = mask.bits.shape
    packed = np.packbits(mask.bits.astype(np.uint8), axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{width} {height}\n".encode())
        fh.write(packed.tobytes())


def save_frame(dir_path, stem, frame: RgbdFrame) -> None:
    """Write the frame as PPM + millimeter PGM (+ intrinsics when present)."""
    rgb8 = np.round(frame.rgb * 255.0).astype(np.uint8)
    depth_mm = np.round(frame.depth * 1000.0)
    if depth_mm.max() > 65535:
        raise ValueError("depth exceeds the 65.535 m range of 16-bit millimeters")
    write_ppm(os.path.join(dir_path, f"{stem}_rgb.ppm"), rgb8)
    write_pgm16(os.path.join(dir_path, f"{stem}_depth.pgm"), depth_mm.astype(np.uint16))
    if frame.intrinsics is not None:
        frame.intrinsics.save(os.path.join(dir_path, f"{stem}_intrinsics.txt"))
