"""Free-form region description.

Dense appearance and depth descriptors sampled on a stride grid inside the
region are aggregated by second-order average pooling

    G = (1/M) sum_i x_i x_i^T + eps I,

mapped through the matrix logarithm (log-Euclidean metric, base point the
identity), flattened isometrically, power-normalized, and PCA-reduced per
descriptor family. A 44-dim outlier-trimmed 3D bounding-box block and an
optional externally computed block complete the region descriptor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .imaging import PointCloud, RgbdFrame, SegmentMask

EPS_REG = 1e-6
SIFT_DIM = 128          # 4x4 cells x 8 orientation bins
LBP_DIM = 59            # 58 uniform patterns + 1 catch-all
SPIN_BINS = 16          # 16x16 histogram per radius
ENRICH_DIM = 6          # x/W, y/H, depth/10, r, g, b
OUTLIER_LEVELS = (0.0, 0.025, 0.05, 0.075)

BLOCK_FAMILIES = (
    "rgb_sift", "rgb_sift_masked", "rgb_lbp",
    "depth_sift", "depth_sift_masked", "depth_lbp",
    "spin", "spin_masked",
)
RGB_FAMILIES = ("rgb_sift", "rgb_sift_masked", "rgb_lbp")

DEFAULT_PCA_DIMS = {
    "rgb_sift": 512, "rgb_sift_masked": 512, "rgb_lbp": 256,
    "depth_sift": 256, "depth_sift_masked": 256, "depth_lbp": 256,
    "spin": 256, "spin_masked": 256,
}


@dataclass
class LocalDescriptorSet:
    descriptors: np.ndarray  # (M, n)
    locations: np.ndarray    # (M, 2) pixel (x, y)

    def __post_init__(self):
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] < 1:
            raise ValueError("descriptor set must be a nonempty MxN matrix")
        if not np.isfinite(self.descriptors).all():
            raise ValueError("descriptors must be finite")


@dataclass(frozen=True)
class SpdMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("SPD matrix must be square")
        if np.abs(v - v.T).max() > 1e-10:
            raise ValueError("matrix is not symmetric within 1e-10")


@dataclass
class PcaModel:
    mean: np.ndarray   # (n,)
    basis: np.ndarray  # (n, d), orthonormal columns

    @property
    def dim(self):
        return self.basis.shape[1]

    def project(self, v):
        return (np.asarray(v) - self.mean) @ self.basis


@dataclass
class RegionDescriptor:
    blocks: dict  # name -> vector, in fixed order

    @property
    def concatenated(self):
        return np.concatenate(list(self.blocks.values()))


@dataclass
class DescriptorConfig:
    stride: int = 4
    patch: int = 16
    spin_radii: tuple = (0.3, 0.5)
    power: float = 0.75
    pca_dims: dict = field(default_factory=lambda: dict(DEFAULT_PCA_DIMS))
    use_depth: bool = True

    @property
    def families(self):
        return BLOCK_FAMILIES if self.use_depth else RGB_FAMILIES


# -- sampling ------------------------------------------------------------------

def _grid_points(bits, stride, patch):
    """Stride-grid sample locations inside the mask as (x, y) int arrays.

    Prefers points whose patch fits the image; falls back to any in-mask grid
    point (patches clamp at the image edge), then to the mask pixel nearest
    the centroid, so every nonempty mask yields M >= 1.
    """
    h, w = bits.shape
    half = patch // 2
    gy, gx = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride),
                         indexing="ij")
    inside = bits[gy, gx]
    full = inside & (gx >= half) & (gx <= w - half) & (gy >= half) & (gy <= h - half)
    for sel in (full, inside):
        if sel.any():
            return gx[sel].ravel(), gy[sel].ravel()
    ys, xs = np.nonzero(bits)
    cx, cy = xs.mean(), ys.mean()
    i = int(np.argmin((xs - cx) ** 2 + (ys - cy) ** 2))
    return np.array([xs[i]]), np.array([ys[i]])


def _window_indices(xs, ys, h, w, patch):
    """Clamped (edge-replicated) patch index grids, shape (M, patch, patch)."""
    half = patch // 2
    off = np.arange(-half, patch - half)
    rows = np.clip(ys[:, None, None] + off[None, :, None], 0, h - 1)
    cols = np.clip(xs[:, None, None] + off[None, None, :], 0, w - 1)
    return rows, cols


def _l2_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


# -- local descriptors -----------------------------------------------------------

def _gradient_maps(channel):
    gy, gx = np.gradient(np.asarray(channel, dtype=np.float64))
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)
    obin = (np.floor((theta + np.pi) * (8 / (2 * np.pi))).astype(np.int64)) % 8
    return mag, obin


def _uniform_lbp_table():
    table = np.full(256, 58, dtype=np.int64)
    uniform = []
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            uniform.append(code)
    for rank, code in enumerate(sorted(uniform)):
        table[code] = rank
    return table


_LBP_TABLE = _uniform_lbp_table()
# clockwise Moore ring from the top-left neighbor
_LBP_RING = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _lbp_code_map(channel):
    channel = np.asarray(channel, dtype=np.float64)
    padded = np.pad(channel, 1, mode="edge")
    h, w = channel.shape
    code = np.zeros((h, w), dtype=np.int64)
    for bit, (dy, dx) in enumerate(_LBP_RING):
        neigh = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        code |= (neigh >= channel).astype(np.int64) << bit
    return _LBP_TABLE[code]


def _sift_like(mag, obin, bits, xs, ys, patch, masked):
    m = len(xs)
    h, w = mag.shape
    rows, cols = _window_indices(xs, ys, h, w, patch)
    weights = mag[rows, cols]
    if masked:
        weights = weights * bits[rows, cols]
    cell = patch // 4
    cy = (np.arange(patch) // cell)[None, :, None]
    cx = (np.arange(patch) // cell)[None, None, :]
    bins = (cy * 4 + cx) * 8 + obin[rows, cols]
    offsets = (np.arange(m) * SIFT_DIM)[:, None, None]
    hist = np.bincount((bins + offsets).ravel(), weights=weights.ravel(),
                       minlength=m * SIFT_DIM)
    return _l2_rows(hist.reshape(m, SIFT_DIM))


def _lbp_hist(codes, bits, xs, ys, patch, masked):
    m = len(xs)
    h, w = codes.shape
    rows, cols = _window_indices(xs, ys, h, w, patch)
    weights = bits[rows, cols].astype(np.float64) if masked else None
    bins = codes[rows, cols]
    offsets = (np.arange(m) * LBP_DIM)[:, None, None]
    hist = np.bincount(
        (bins + offsets).ravel(),
        weights=None if weights is None else weights.ravel(),
        minlength=m * LBP_DIM).astype(np.float64)
    return _l2_rows(hist.reshape(m, LBP_DIM))


def make_enrichment(frame: RgbdFrame) -> np.ndarray:
    """Per-pixel (x/W, y/H, depth/10m, r, g, b) appended to local descriptors."""
    h, w = frame.height, frame.width
    ny, nx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    return np.dstack([nx, ny, frame.depth / 10.0, frame.rgb])


def dense_grid_descriptors(channel, mask: SegmentMask, kind: str,
                           masked: bool = False, enrichment=None,
                           stride: int = 4, patch: int = 16) -> LocalDescriptorSet:
    """SIFT-like or uniform-LBP descriptors on a stride grid inside the mask.

    The masked variant zeroes contributions of pixels outside the region.
    Each descriptor is l2-normalized, then the enrichment values at its
    location are appended when an enrichment image is given.
    """
    if mask.area == 0:
        raise ValueError("cannot describe an empty mask")
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim == 3:
        channel = channel.mean(axis=2)
    if channel.shape != mask.bits.shape:
        raise ValueError("channel and mask shapes differ")
    xs, ys = _grid_points(mask.bits, stride, patch)
    if kind == "sift_like":
        mag, obin = _gradient_maps(channel)
        desc = _sift_like(mag, obin, mask.bits, xs, ys, patch, masked)
    elif kind == "lbp":
        codes = _lbp_code_map(channel)
        desc = _lbp_hist(codes, mask.bits, xs, ys, patch, masked)
    else:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    if enrichment is not None:
        desc = np.hstack([desc, enrichment[ys, xs]])
    return LocalDescriptorSet(descriptors=desc, locations=np.column_stack([xs, ys]))


# -- spin images -----------------------------------------------------------------

def _point_lookup(cloud: PointCloud, shape):
    lookup = np.full(shape[0] * shape[1], -1, dtype=np.int64)
    lookup[cloud.pixel_index] = np.arange(len(cloud))
    return lookup.reshape(shape)


def estimate_normal(points, toward=None):
    """Least-squares plane normal of a small point set, oriented toward the
    camera at the origin (n . p <= 0). Degenerate sets get the view axis."""
    if len(points) < 3:
        return np.array([0.0, 0.0, -1.0])
    centered = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    normal = vecs[:, 0]
    anchor = toward if toward is not None else points.mean(axis=0)
    if normal @ anchor > 0:
        normal = -normal
    return normal


def spin_images(cloud: PointCloud, mask: SegmentMask, radii=(0.3, 0.5),
                masked: bool = False, enrichment=None, stride: int = 4,
                normal_window: int = 5, tree: cKDTree | None = None
                ) -> LocalDescriptorSet:
    """16x16 (radial, signed axial) histograms of neighbors within each
    radius, both radii concatenated per sampled point.

    Normals come from a plane fit over the normal_window pixel neighborhood;
    the masked variant restricts neighbors to the region's own points. A
    prebuilt KD-tree over the full cloud may be passed for the unmasked case.
    """
    h, w = mask.bits.shape
    if mask.area == 0:
        raise ValueError("cannot describe an empty mask")
    lookup = _point_lookup(cloud, (h, w))
    valid_bits = mask.bits & (lookup >= 0)
    if not valid_bits.any():
        raise ValueError("no valid depth in region")

    xs, ys = _grid_points(valid_bits, stride, patch=0)
    sample_idx = lookup[ys, xs]
    samples = cloud.points[sample_idx]
    m = len(xs)

    if masked:
        region_idx = lookup[mask.bits]
        region_idx = region_idx[region_idx >= 0]
        neighbor_ids = region_idx
        tree = cKDTree(cloud.points[region_idx])
    else:
        neighbor_ids = np.arange(len(cloud))
        if tree is None:
            tree = cKDTree(cloud.points)

    normals = np.empty((m, 3))
    halfn = normal_window // 2
    for i, (x, y) in enumerate(zip(xs, ys)):
        y0, y1 = max(0, y - halfn), min(h, y + halfn + 1)
        x0, x1 = max(0, x - halfn), min(w, x + halfn + 1)
        ids = lookup[y0:y1, x0:x1].ravel()
        pts = cloud.points[ids[ids >= 0]]
        normals[i] = estimate_normal(pts, toward=samples[i])

    cells = SPIN_BINS * SPIN_BINS
    out = np.zeros((m, cells * len(radii)))
    for r_i, radius in enumerate(radii):
        neigh_lists = tree.query_ball_point(samples, radius)
        lens = np.array([len(nb) for nb in neigh_lists])
        if lens.sum() == 0:
            continue
        flat = np.concatenate([np.asarray(nb, dtype=np.int64)
                               for nb in neigh_lists if len(nb)])
        owner = np.repeat(np.arange(m), lens)
        ids = neighbor_ids[flat]
        keep = ids != sample_idx[owner]  # a point is not its own neighbor
        owner, ids = owner[keep], ids[keep]
        d = cloud.points[ids] - samples[owner]
        beta = np.einsum("ij,ij->i", d, normals[owner])
        alpha = np.sqrt(np.maximum(np.einsum("ij,ij->i", d, d) - beta**2, 0.0))
        a_bin = np.minimum((alpha / radius * SPIN_BINS).astype(np.int64),
                           SPIN_BINS - 1)
        b_bin = np.minimum(((beta + radius) / (2 * radius) * SPIN_BINS)
                           .astype(np.int64), SPIN_BINS - 1)
        hist = np.bincount(owner * cells + b_bin * SPIN_BINS + a_bin,
                           minlength=m * cells).reshape(m, cells)
        out[:, r_i * cells:(r_i + 1) * cells] = hist
    desc = _l2_rows(out)
    if enrichment is not None:
        desc = np.hstack([desc, enrichment[ys, xs]])
    return LocalDescriptorSet(descriptors=desc, locations=np.column_stack([xs, ys]))


# -- pooling, log map, flattening, PCA -------------------------------------------

def _canonical_rows(x):
    """Unique rows in sorted order with multiplicities.

    Pooling over (count-weighted) canonical rows is bit-exactly invariant to
    row permutation, and doubling every multiplicity scales each partial sum
    by a power of two, so duplication invariance is exact as well.
    """
    unique, counts = np.unique(x, axis=0, return_counts=True)
    return unique, counts.astype(np.float64)


def o2p_pool(descriptor_set) -> SpdMatrix:
    """Second-order average pooling: mean outer product plus eps I."""
    x = descriptor_set.descriptors if isinstance(
        descriptor_set, LocalDescriptorSet) else np.asarray(descriptor_set)
    m, n = x.shape
    unique, counts = _canonical_rows(x)
    g = (unique * counts[:, None]).T @ unique / m + EPS_REG * np.eye(n)
    return SpdMatrix((g + g.T) / 2)


def log_map(g) -> np.ndarray:
    """Matrix logarithm of an SPD matrix by symmetric eigendecomposition."""
    values = g.values if isinstance(g, SpdMatrix) else np.asarray(g)
    eigvals, eigvecs = np.linalg.eigh(values)
    if eigvals.min() < EPS_REG / 2:
        raise ValueError(
            f"eigenvalue {eigvals.min():.3g} below the regularization floor; "
            "pooling upstream is broken")
    out = (eigvecs * np.log(eigvals)) @ eigvecs.T
    return (out + out.T) / 2


def pooled_log_matrix(x: np.ndarray, eps: float = EPS_REG) -> np.ndarray:
    """log(o2p_pool(x)) from the row-space eigenstructure of x.

    For M < n this is O(M^2 n) instead of O(n^3): the pooled matrix has
    eigenvalues s_i^2/M + eps on the row space and exactly eps elsewhere, so
    log G = log(eps) I + V diag(log(s^2/M + eps) - log(eps)) V^T with V the
    right singular vectors, recovered from the small M x M Gram matrix.
    Directions with negligible energy contribute gains below 1e-8 and are
    dropped; agreement with log_map(o2p_pool(x)) is within that tolerance.
    """
    x = np.asarray(x, dtype=np.float64)
    m, n = x.shape
    if m >= n:
        return log_map(o2p_pool(x))
    gram = x @ x.T
    eigvals, u = np.linalg.eigh(gram)
    keep = eigvals > max(1e-12 * max(eigvals[-1], 0.0), m * eps * 1e-9)
    eigvals, u = eigvals[keep], u[:, keep]
    v = x.T @ (u / np.sqrt(eigvals))
    gains = np.log(eigvals / m + eps) - np.log(eps)
    out = (v * gains) @ v.T + np.log(eps) * np.eye(n)
    return (out + out.T) / 2


def flatten_and_normalize(l: np.ndarray, p: float = 0.75) -> np.ndarray:
    """Isometric upper-triangle flattening followed by power normalization."""
    l = np.asarray(l, dtype=np.float64)
    iu = np.triu_indices(l.shape[0])
    coeff = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    vec = l[iu] * coeff
    if p == 1.0:
        return vec
    return np.sign(vec) * np.abs(vec) ** p


def pca_fit(samples, d: int) -> PcaModel:
    """Mean-centered top-d principal basis via SVD."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_fit needs at least 2 sample vectors")
    m, n = x.shape
    if d > min(n, m):
        raise ValueError(f"d={d} too large for {m} samples of dim {n}")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = vt[:d].T.copy()
    # deterministic sign: largest-magnitude component positive
    flips = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(d)])
    basis *= np.where(flips == 0, 1.0, flips)
    return PcaModel(mean=mean, basis=basis)


def pca_project(model: PcaModel, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.mean.shape[0]:
        raise ValueError(
            f"vector dim {v.shape[-1]} does not match PCA dim {model.mean.shape[0]}")
    return model.project(v)


# -- 3D bounding-box features ------------------------------------------------------

def _box_stats(sizes):
    sx, sy, sz = sizes
    volume = sx * sy * sz
    surface = 2 * (sx * sy + sy * sz + sz * sx)
    diagonal = float(np.sqrt(sx**2 + sy**2 + sz**2))
    perimeter = 4 * (sx + sy + sz)
    smin, smed, smax = np.sort(sizes)
    aspect = smin / smax if smax > 0 else 0.0
    return [volume, surface, diagonal, perimeter, smin, smed, smax, sx, sy, sz, aspect]


def point_cloud_features(mask: SegmentMask, cloud: PointCloud) -> np.ndarray:
    """11 axis-aligned bounding-box statistics at 4 outlier-trim levels."""
    lookup = _point_lookup(cloud, mask.bits.shape)
    idx = lookup[mask.bits]
    idx = idx[idx >= 0]
    if len(idx) == 0:
        raise ValueError("no valid depth in region")
    pts = cloud.points[idx]
    features = []
    for q in OUTLIER_LEVELS:
        lo = np.quantile(pts, q / 2, axis=0)
        hi = np.quantile(pts, 1 - q / 2, axis=0)
        features.extend(_box_stats(np.maximum(hi - lo, 0.0)))
    return np.array(features)


# -- region description -------------------------------------------------------------

class DescriptorBank:
    """Fitted PCA models per descriptor family plus the power exponent."""

    def __init__(self, models: dict, power: float = 0.75):
        self.models = dict(models)
        self.power = power

    def project(self, family: str, vec):
        model = self.models.get(family)
        if model is None:
            raise KeyError(f"PCA bank has no model for family {family!r}")
        return pca_project(model, vec)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<IIId", 0x4B4E4142, 1, len(self.models), self.power))
            for name in sorted(self.models):
                model = self.models[name]
                raw = name.encode()
                n, d = model.basis.shape
                fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(struct.pack("<II", n, d))
                fh.write(model.mean.astype("<f8").tobytes())
                fh.write(model.basis.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic, version, count, power = struct.unpack("<IIId", fh.read(20))
            if magic != 0x4B4E4142 or version != 1:
                raise ValueError(f"{path} is not a descriptor bank file")
            models = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode()
                n, d = struct.unpack("<II", fh.read(8))
                mean = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
                basis = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
                models[name] = PcaModel(mean=mean, basis=basis.astype(np.float64))
        return cls(models, power=power)


class RegionDescriber:
    """Per-frame cache of channel maps so many regions describe cheaply."""

    def __init__(self, frame: RgbdFrame, cloud: PointCloud | None,
                 config: DescriptorConfig | None = None):
        self.frame = frame
        self.cloud = cloud
        self.config = config or DescriptorConfig()
        self.enrichment = make_enrichment(frame)
        gray = frame.gray()
        self._channels = {"rgb": gray, "depth": frame.depth}
        self._grad = {name: _gradient_maps(ch) for name, ch in self._channels.items()}
        self._lbp = {name: _lbp_code_map(ch) for name, ch in self._channels.items()}
        self._cloud_tree = None
        if cloud is not None and len(cloud) and self.config.use_depth:
            self._cloud_tree = cKDTree(cloud.points)

    def local_descriptors(self, family: str, mask: SegmentMask) -> LocalDescriptorSet:
        cfg = self.config
        if family in ("spin", "spin_masked"):
            if self.cloud is None:
                raise ValueError("spin images need a point cloud")
            return spin_images(self.cloud, mask, radii=cfg.spin_radii,
                               masked=family.endswith("masked"),
                               enrichment=self.enrichment, stride=cfg.stride,
                               tree=self._cloud_tree)
        channel, kind = family.rsplit("_", 1)
        masked = False
        if kind == "masked":
            channel, kind = channel.rsplit("_", 1)
            masked = True
        xs_kind = "sift_like" if kind == "sift" else "lbp"
        ch = self._channels[channel]
        if xs_kind == "sift_like":
            mag, obin = self._grad[channel]
            xs, ys = _grid_points(mask.bits, cfg.stride, cfg.patch)
            desc = _sift_like(mag, obin, mask.bits, xs, ys, cfg.patch, masked)
        else:
            codes = self._lbp[channel]
            xs, ys = _grid_points(mask.bits, cfg.stride, cfg.patch)
            desc = _lbp_hist(codes, mask.bits, xs, ys, cfg.patch, masked)
        desc = np.hstack([desc, self.enrichment[ys, xs]])
        return LocalDescriptorSet(descriptors=desc,
                                  locations=np.column_stack([xs, ys]))

    def raw_block(self, family: str, mask: SegmentMask) -> np.ndarray:
        """Pooled, log-mapped, flattened, power-normalized block (pre-PCA)."""
        dset = self.local_descriptors(family, mask)
        return flatten_and_normalize(
            pooled_log_matrix(dset.descriptors), p=self.config.power)

    def describe(self, mask: SegmentMask, bank: DescriptorBank,
                 external=None) -> RegionDescriptor:
        blocks = {}
        for family in self.config.families:
            blocks[family] = bank.project(family, self.raw_block(family, mask))
        if self.config.use_depth:
            if self.cloud is None:
                raise ValueError("point-cloud features need a point cloud")
            blocks["point_cloud"] = point_cloud_features(mask, self.cloud)
        if external is not None:
            blocks["external"] = np.asarray(external, dtype=np.float64)
        return RegionDescriptor(blocks=blocks)


def describe_region(frame: RgbdFrame, cloud: PointCloud, mask: SegmentMask,
                    bank: DescriptorBank, external=None,
                    config: DescriptorConfig | None = None) -> RegionDescriptor:
    return RegionDescriber(frame, cloud, config).describe(mask, bank, external)


def batch_describe(describer: RegionDescriber, masks, bank: DescriptorBank,
                   externals=None) -> np.ndarray:
    """Descriptor matrix for many regions of one frame.

    Identical per-region output to describe(); PCA projection runs as one
    matrix product per family, which dominates for the wide spin blocks.
    """
    if not masks:
        dim = sum(bank.models[f].dim for f in describer.config.families)
        return np.zeros((0, dim))
    pieces = []
    for family in describer.config.families:
        raw = np.vstack([describer.raw_block(family, m) for m in masks])
        pieces.append(pca_project(bank.models[family], raw))
    if describer.config.use_depth:
        pieces.append(np.vstack(
            [point_cloud_features(m, describer.cloud) for m in masks]))
    if externals is not None:
        pieces.append(np.atleast_2d(np.asarray(externals, dtype=np.float64)))
    return np.hstack(pieces)


def fit_bank(describers_and_masks, config: DescriptorConfig,
             max_samples: int = 512) -> DescriptorBank:
    """Fit per-family PCA models from (RegionDescriber, mask) training pairs.

    Requested dims are clamped to what the sample count and block dimension
    allow. Samples beyond max_samples are ignored (corpus order, so the fit
    is deterministic).
    """
    pairs = list(describers_and_masks)[:max_samples]
    if len(pairs) < 2:
        raise ValueError("PCA bank needs at least 2 training regions")
    models = {}
    for family in config.families:
        rows = [describer.raw_block(family, mask) for describer, mask in pairs]
        x = np.vstack(rows)
        d = min(config.pca_dims[family], x.shape[0], x.shape[1])
        models[family] = pca_fit(x, d)
    return DescriptorBank(models, power=config.power)


# -- descriptor files ----------------------------------------------------------------

_DESC_MAGIC = 0x43534452  # "RDSC" little-endian


def write_descriptor_file(path, matrix) -> None:
    """Header (magic, version, n_regions, dim as u32 LE) + float32 rows."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float32))
    n, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IIII", _DESC_MAGIC, 1, n, dim))
        fh.write(matrix.astype("<f4").tobytes())


def read_descriptor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated descriptor header")
        magic, version, n, dim = struct.unpack("<IIII", header)
        if magic != _DESC_MAGIC or version != 1:
            raise ValueError(f"{path} is not a descriptor file")
        raw = fh.read(4 * n * dim)
    if len(raw) != 4 * n * dim:
        raise ValueError(f"{path}: truncated descriptor data")
    return np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
