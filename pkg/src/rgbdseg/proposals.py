"""Per-image proposal pools: seeding, breakpoint collection, filtering,
de-duplication, objectness ranking, and maximal-marginal diversification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boundaries import BoundaryMap
from .imaging import SegmentMask, mask_iou, read_pbm, write_pbm
from .parametric_maxflow import (
    DEFAULT_LAMBDA_RANGE,
    DEFAULT_RESOLUTION,
    build_energy,
    solve_breakpoints,
)

N_OBJECTNESS_FEATURES = 7


@dataclass(frozen=True)
class ObjectnessRanker:
    """Linear scorer over the fixed objectness feature vector."""

    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (N_OBJECTNESS_FEATURES,):
            raise ValueError(
                f"ranker expects {N_OBJECTNESS_FEATURES} weights, got {w.shape}")
        object.__setattr__(self, "weights", w)

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return features @ self.weights + self.bias


# hand-set bootstrap ranker: compact, convex, boundary-aligned regions near
# the image center score high; replaced by a trained ranker when available
DEFAULT_RANKER = ObjectnessRanker(
    weights=np.array([0.5, -0.15, 1.5, 0.8, 0.2, 0.3, -0.3]), bias=0.0)


@dataclass
class PoolConfig:
    sigmas: tuple = (0.05, 0.1, 0.2)
    lambda_range: tuple = DEFAULT_LAMBDA_RANGE
    resolution: int = DEFAULT_RESOLUTION
    min_area_frac: float = 0.0005
    max_area_frac: float = 0.9
    dedup_iou: float = 0.95
    ranker: ObjectnessRanker = field(default_factory=lambda: DEFAULT_RANKER)


@dataclass
class ProposalPool:
    masks: list
    objectness: np.ndarray
    provenance: list          # (seed index, lam) per mask
    features: np.ndarray | None = None  # objectness features, None when loaded

    def __len__(self):
        return len(self.masks)


def generate_seeds(width: int, height: int, n: int) -> list:
    """n x n singleton seeds at grid-cell centers, never on the border."""
    if n < 1:
        raise ValueError("grid must be at least 1x1")
    if width <= 3 * n or height <= 3 * n:
        raise ValueError(f"image {width}x{height} too small for a {n}x{n} seed grid")
    step_x, step_y = width // n, height // n
    xs = [step_x // 2 + i * step_x for i in range(n)]
    ys = [step_y // 2 + j * step_y for j in range(n)]
    return [(x, y) for y in ys for x in xs]


def _perimeter_pixels(bits):
    """Mask pixels 4-adjacent to the outside (image edge counts as outside)."""
    padded = np.pad(bits, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return bits & ~interior


def objectness_features(mask: SegmentMask, fused: BoundaryMap) -> np.ndarray:
    """Seven shape/appearance regularity measurements for ranking."""
    if mask.area == 0:
        raise ValueError("objectness features need a nonempty mask")
    h, w = mask.bits.shape
    bits = mask.bits
    area = mask.area

    perimeter = _perimeter_pixels(bits)
    n_perim = int(perimeter.sum())
    mean_boundary = float(fused.values[perimeter].mean()) if n_perim else 0.0

    xmin, ymin, xmax, ymax = mask.bbox
    bw, bh = xmax - xmin + 1, ymax - ymin + 1
    convexity = area / (bw * bh)
    aspect = min(bw, bh) / max(bw, bh)

    n_components = ndimage.label(bits)[1]
    inv_labels, n_inv = ndimage.label(~bits)
    edge_labels = np.unique(np.concatenate([
        inv_labels[0, :], inv_labels[-1, :], inv_labels[:, 0], inv_labels[:, -1]]))
    n_holes = n_inv - len(edge_labels[edge_labels > 0])
    euler = n_components - n_holes

    ys, xs = np.nonzero(bits)
    cx, cy = xs.mean(), ys.mean()
    center_dist = float(np.hypot(cx - (w - 1) / 2, cy - (h - 1) / 2)
                        / (0.5 * np.hypot(w, h)))

    return np.array([
        area / (w * h),
        n_perim / np.sqrt(area),
        mean_boundary,
        convexity,
        float(euler),
        aspect,
        center_dist,
    ])


def _popcount_and(packed_a, packed_b):
    return int(np.bitwise_count(packed_a & packed_b).sum())


def generate_pool(frame, fused: BoundaryMap, seeds, config: PoolConfig | None = None
                  ) -> ProposalPool:
    """Union over seeds x sigma values of all breakpoint masks, degenerate
    masks dropped, near-duplicates removed keeping the earlier mask."""
    config = config or PoolConfig()
    h, w = frame.height, frame.width
    min_area = config.min_area_frac * w * h
    max_area = config.max_area_frac * w * h

    candidates = []  # (mask, seed_idx, lam)
    for seed_idx, seed_xy in enumerate(seeds):
        for sigma in config.sigmas:
            energy = build_energy(frame, fused, [seed_xy], sigma,
                                  lambda_range=config.lambda_range,
                                  resolution=config.resolution)
            # the pool drops oversized masks and dedups at dedup_iou, so the
            # enumeration may skip what those filters would discard
            solutions = solve_breakpoints(energy, max_area=int(max_area),
                                          coarsen_iou=config.dedup_iou)
            for sol in solutions:
                if min_area <= sol.mask.area <= max_area:
                    candidates.append((sol.mask, seed_idx, sol.lam))

    kept, kept_packed, kept_area = [], [], []
    for mask, seed_idx, lam in candidates:
        packed = mask.packed()
        duplicate = False
        for other_packed, other_area in zip(kept_packed, kept_area):
            lo, hi = sorted((other_area, mask.area))
            if lo < config.dedup_iou * hi:
                continue  # IoU <= lo/hi, cannot reach the threshold
            inter = _popcount_and(packed, other_packed)
            union = other_area + mask.area - inter
            if union and inter / union >= config.dedup_iou:
                duplicate = True
                break
        if not duplicate:
            kept.append((mask, seed_idx, lam))
            kept_packed.append(packed)
            kept_area.append(mask.area)

    masks = [m for m, _, _ in kept]
    provenance = [(s, lam) for _, s, lam in kept]
    if masks:
        features = np.vstack([objectness_features(m, fused) for m in masks])
        scores = config.ranker.score(features)
    else:
        features = np.zeros((0, N_OBJECTNESS_FEATURES))
        scores = np.zeros(0)
    return ProposalPool(masks=masks, objectness=scores,
                        provenance=provenance, features=features)


def rank_and_diversify(pool: ProposalPool, ranker: ObjectnessRanker, k: int,
                       gamma: float = 0.75) -> ProposalPool:
    """Greedy maximal-marginal selection: argmax of score - gamma * max IoU
    with the already-selected set, up to k masks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(pool)
    if n == 0:
        return ProposalPool([], np.zeros(0), [], pool.features)
    if pool.features is None:
        raise ValueError("pool has no objectness features (loaded from disk?)")
    scores = ranker.score(pool.features)

    packed = np.vstack([m.packed() for m in pool.masks])
    areas = np.array([m.area for m in pool.masks], dtype=np.int64)
    max_iou = np.zeros(n)
    remaining = np.ones(n, dtype=bool)
    order = []
    while len(order) < min(k, n):
        gains = np.where(remaining, scores - gamma * max_iou, -np.inf)
        pick = int(np.argmax(gains))  # argmax takes the lowest tied index
        order.append(pick)
        remaining[pick] = False
        if not remaining.any():
            break
        inter = np.bitwise_count(packed[remaining] & packed[pick]).sum(axis=1)
        union = areas[remaining] + areas[pick] - inter
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
        max_iou[remaining] = np.maximum(max_iou[remaining], iou)

    return ProposalPool(
        masks=[pool.masks[i] for i in order],
        objectness=scores[order],
        provenance=[pool.provenance[i] for i in order],
        features=pool.features[order],
    )


def fit_objectness_ranker(features, targets, regularization=1e-6) -> ObjectnessRanker:
    """Least-squares fit of objectness features to best ground-truth IoU."""
    from .recognition import ridge_fit

    w, b = ridge_fit(np.asarray(features, dtype=np.float64),
                     np.asarray(targets, dtype=np.float64), regularization)
    return ObjectnessRanker(weights=w, bias=float(b))


def save_pool(dir_path, pool: ProposalPool) -> None:
    """A directory of PBM masks plus one index line per mask."""
    import os

    os.makedirs(dir_path, exist_ok=True)
    lines = []
    for i, (mask, (seed_idx, lam), score) in enumerate(
            zip(pool.masks, pool.provenance, pool.objectness)):
        name = f"mask_{i:04d}.pbm"
        write_pbm(os.path.join(dir_path, name), mask)
        lines.append(f"{name} {seed_idx} {lam!r} {float(score)!r}\n")
    with open(os.path.join(dir_path, "index.txt"), "w") as fh:
        fh.writelines(lines)


def load_pool(dir_path) -> ProposalPool:
    import os

    masks, provenance, scores = [], [], []
    with open(os.path.join(dir_path, "index.txt")) as fh:
        for line in fh:
            name, seed_idx, lam, score = line.split()
            masks.append(read_pbm(os.path.join(dir_path, name)))
            provenance.append((int(seed_idx), float(lam)))
            scores.append(float(score))
    return ProposalPool(masks=masks, objectness=np.array(scores),
                        provenance=provenance, features=None)
