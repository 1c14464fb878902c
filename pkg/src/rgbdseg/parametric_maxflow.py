"""Seed-constrained binary labeling energies and their full breakpoint family.

The energy over a pixel grid is

    E_lam(L) = sum_x D_lam(l_x) + sum_{(x,y) in N(x)} w_xy [l_x != l_y]

with 4-connected pairwise weights, seed pixels forced foreground, image-edge
pixels forced background, and the unary schedule cost(bg) = lam, cost(fg) = 0
for free pixels. Source-side capacities are nondecreasing in lam, so optimal
foregrounds are nested and the distinct minimizers over a lam interval (the
breakpoints) can be enumerated by divide and conquer.

Exactness: pairwise weights are quantized to integers at `resolution` when
the energy is built, lam is restricted to the same integer grid, and all
cost comparisons are integer (cost-line crossings use Fractions). Ties are
broken toward the smaller foreground by extracting the minimal source-side
min cut (source-reachable set of the residual graph). Capacities must fit
int32 for the flow backend; the builder enforces the bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

from .imaging import SegmentMask

DEFAULT_RESOLUTION = 100_000
DEFAULT_LAMBDA_RANGE = (0.0, 4.0)
_INT32_BUDGET = 2**31 - 2**20  # headroom below the backend's int32 ceiling


@dataclass(frozen=True)
class CutSolution:
    """One minimizer of the energy family, with the lam it was optimal at."""

    mask: SegmentMask
    energy: float
    lam: float


class SpatialEnergy:
    """Immutable energy instance plus the prebuilt flow-graph template.

    Node layout: 0 = source (foreground), 1 = sink (background), free pixels
    2..n_free+1 in row-major order. Forced pixels are contracted into the
    terminals; seed-border adjacencies contribute the constant `const_cut`.
    """

    def __init__(self, w_right, w_down, seed, border,
                 lambda_range=DEFAULT_LAMBDA_RANGE, resolution=DEFAULT_RESOLUTION):
        seed = np.asarray(seed, dtype=bool)
        border = np.asarray(border, dtype=bool)
        h, w = seed.shape
        if border.shape != (h, w):
            raise ValueError("seed/border shape mismatch")
        if not seed.any():
            raise ValueError("seed set is empty")
        if (seed & border).any():
            raise ValueError("seed pixel lies on the forced-background border")
        if lambda_range[0] < 0 or lambda_range[1] < lambda_range[0]:
            raise ValueError(f"bad lambda range {lambda_range}")
        resolution = int(resolution)
        if resolution < 1:
            raise ValueError("resolution must be a positive integer")

        w_right = np.asarray(w_right, dtype=np.float64)
        w_down = np.asarray(w_down, dtype=np.float64)
        if w_right.shape != (h, w) or w_down.shape != (h, w):
            raise ValueError("weight grids must match the pixel grid")
        if not (np.isfinite(w_right).all() and np.isfinite(w_down).all()):
            raise ValueError("weights must be finite")
        if w_right.min() < 0 or w_down.min() < 0:
            raise ValueError("weights must be >= 0")

        self.height, self.width = h, w
        self.seed = seed
        self.border = border
        self.free = ~seed & ~border
        self.lambda_range = (float(lambda_range[0]), float(lambda_range[1]))
        self.resolution = resolution
        # quantize once; every downstream consumer sees only these integers
        self.w_right = np.round(w_right * resolution).astype(np.int64)
        self.w_down = np.round(w_down * resolution).astype(np.int64)
        self.w_right[:, -1] = 0
        self.w_down[-1, :] = 0
        for arr in (self.seed, self.border, self.free, self.w_right, self.w_down):
            arr.setflags(write=False)
        self._build_graph()

    # -- graph template -------------------------------------------------------

    def _build_graph(self):
        h, w = self.height, self.width
        free = self.free
        fys, fxs = np.nonzero(free)
        self.n_free = n_free = len(fys)
        node_id = -np.ones((h, w), dtype=np.int64)
        node_id[fys, fxs] = np.arange(2, 2 + n_free)
        self._free_yx = (fys, fxs)

        label = np.zeros((h, w), dtype=np.int8)  # 1 = contracted into source
        label[self.seed] = 1

        rows, cols, caps = [], [], []
        seed_adj = np.zeros(n_free, dtype=np.int64)
        border_adj = np.zeros(n_free, dtype=np.int64)
        const_cut = 0
        for (dy, dx, wgrid) in ((0, 1, self.w_right), (1, 0, self.w_down)):
            a_free = free[: h - dy, : w - dx]
            b_free = free[dy:, dx:]
            wv = wgrid[: h - dy, : w - dx]
            both = a_free & b_free
            ia = node_id[: h - dy, : w - dx][both]
            ib = node_id[dy:, dx:][both]
            wboth = wv[both]
            rows.extend([ia, ib])
            cols.extend([ib, ia])
            caps.extend([wboth, wboth])
            # free pixel next to a forced pixel: fold into terminal arcs
            a_only = a_free & ~b_free
            np.add.at(
                seed_adj, node_id[: h - dy, : w - dx][a_only] - 2,
                np.where(label[dy:, dx:][a_only] == 1, wv[a_only], 0))
            np.add.at(
                border_adj, node_id[: h - dy, : w - dx][a_only] - 2,
                np.where(label[dy:, dx:][a_only] == 0, wv[a_only], 0))
            b_only = b_free & ~a_free
            np.add.at(
                seed_adj, node_id[dy:, dx:][b_only] - 2,
                np.where(label[: h - dy, : w - dx][b_only] == 1, wv[b_only], 0))
            np.add.at(
                border_adj, node_id[dy:, dx:][b_only] - 2,
                np.where(label[: h - dy, : w - dx][b_only] == 0, wv[b_only], 0))
            neither = ~a_free & ~b_free
            diff = label[: h - dy, : w - dx][neither] != label[dy:, dx:][neither]
            const_cut += int(wv[neither][diff].sum())
        self.const_cut = const_cut
        self._seed_adj = seed_adj
        self._border_adj = border_adj

        lam_max_int = int(round(self.lambda_range[1] * self.resolution))
        if n_free:
            max_cap = lam_max_int + int(seed_adj.max(initial=0))
            flow_bound = int(border_adj.sum()) + const_cut
            if max_cap > _INT32_BUDGET or flow_bound > _INT32_BUDGET:
                raise ValueError(
                    "integer capacities exceed the int32 flow backend; lower the "
                    "resolution or the image size"
                )
        if n_free == 0:
            self._graph = None
            return

        free_nodes = np.arange(2, 2 + n_free)
        rows.extend([np.zeros(n_free, np.int64), free_nodes,
                     free_nodes, np.ones(n_free, np.int64)])
        cols.extend([free_nodes, np.zeros(n_free, np.int64),
                     np.ones(n_free, np.int64), free_nodes])
        caps.extend([seed_adj, np.zeros(n_free, np.int64),
                     border_adj, np.zeros(n_free, np.int64)])
        n = 2 + n_free
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        caps = np.concatenate(caps)
        g = csr_matrix((caps, (rows, cols)), shape=(n, n), dtype=np.int64)
        g.sort_indices()
        # source row must list free nodes in id order so lam can be written
        # into the data array as a contiguous slice
        s_cols = g.indices[g.indptr[0]:g.indptr[1]]
        assert np.array_equal(s_cols, free_nodes)
        self._indptr = g.indptr
        self._indices = g.indices
        self._data0 = g.data.astype(np.int32)
        self._s_slice = (int(g.indptr[0]), int(g.indptr[1]))
        self._seed_adj_sorted = self._data0[self._s_slice[0]:self._s_slice[1]].copy()

    # -- solving --------------------------------------------------------------

    def _min_cut(self, lam_int: int):
        """Minimal-foreground optimal labeling at integer-grid lam.

        Returns (fg_free boolean over free pixels, flow_value).
        """
        lo, hi = self._s_slice
        data = self._data0.copy()
        data[lo:hi] = self._seed_adj_sorted + np.int32(lam_int)
        n = 2 + self.n_free
        g = csr_matrix((data, self._indices, self._indptr), shape=(n, n))
        result = maximum_flow(g, 0, 1)
        flow = result.flow
        if (flow.indices is self._indices
                or np.array_equal(flow.indices, self._indices)):
            # structure arrays must be copies: eliminate_zeros compacts them
            # in place and would corrupt the shared graph template
            residual = csr_matrix(((data > flow.data).astype(np.int8),
                                   self._indices.copy(), self._indptr.copy()),
                                  shape=(n, n))
        else:  # backend changed the sparsity; fall back to sparse arithmetic
            residual = g - flow
        # explicit zeros count as edges for csgraph traversal; drop them
        residual.eliminate_zeros()
        reach = breadth_first_order(residual, 0, directed=True,
                                    return_predecessors=False)
        fg_free = np.zeros(self.n_free, dtype=bool)
        nodes = np.asarray(reach)
        fg_free[nodes[nodes >= 2] - 2] = True
        return fg_free, int(result.flow_value)

    def full_mask(self, fg_free) -> np.ndarray:
        fg = self.seed.copy()
        fys, fxs = self._free_yx
        fg[fys[fg_free], fxs[fg_free]] = True
        return fg

    def cut_terms(self, fg_full):
        """(pairwise cut weight, background-count slope) for a labeling."""
        diff_h = fg_full[:, :-1] != fg_full[:, 1:]
        diff_v = fg_full[:-1, :] != fg_full[1:, :]
        a = int(self.w_right[:, :-1][diff_h].sum()) + int(self.w_down[:-1, :][diff_v].sum())
        n_bg = int(self.n_free - (fg_full & self.free).sum())
        return a, n_bg

    def labeling_energy(self, fg_full, lam: float) -> float:
        """Direct evaluation of the energy for any labeling at lam."""
        a, n_bg = self.cut_terms(np.asarray(fg_full, dtype=bool))
        lam_int = int(round(lam * self.resolution))
        return (a + n_bg * lam_int) / self.resolution


def build_energy(frame, fused, seed, sigma, lambda_range=DEFAULT_LAMBDA_RANGE,
                 resolution=DEFAULT_RESOLUTION) -> SpatialEnergy:
    """Energy for one seed: pairwise weights from the fused boundary map,
    image-edge pixels forced background.

    `seed` is an iterable of (x, y) pixels; all must be interior.
    """
    from .boundaries import edge_penalties

    h, w = frame.height, frame.width
    if fused.shape != (h, w):
        raise ValueError("fused boundary map does not match the frame")
    seed = list(seed)
    if not seed:
        raise ValueError("seed set is empty")
    seed_mask = np.zeros((h, w), dtype=bool)
    for (x, y) in seed:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"seed pixel {(x, y)} outside {w}x{h} image")
        if x == 0 or y == 0 or x == w - 1 or y == h - 1:
            raise ValueError(f"seed pixel {(x, y)} lies on the image border")
        seed_mask[y, x] = True
    border = np.zeros((h, w), dtype=bool)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    w_right, w_down = edge_penalties(fused, sigma)
    return SpatialEnergy(w_right, w_down, seed_mask, border,
                         lambda_range=lambda_range, resolution=resolution)


def _solution(energy: SpatialEnergy, fg_full, lam_int: int) -> CutSolution:
    a, n_bg = energy.cut_terms(fg_full)
    return CutSolution(
        mask=SegmentMask(fg_full),
        energy=(a + n_bg * lam_int) / energy.resolution,
        lam=lam_int / energy.resolution,
    )


def solve_at(energy: SpatialEnergy, lam: float) -> CutSolution:
    """Global minimizer at lam (quantized to the resolution grid)."""
    lo, hi = energy.lambda_range
    if not lo <= lam <= hi:
        raise ValueError(f"lam {lam} outside range [{lo}, {hi}]")
    lam_int = int(round(lam * energy.resolution))
    if energy.n_free == 0:
        return _solution(energy, energy.seed.copy(), lam_int)
    fg_free, flow = energy._min_cut(lam_int)
    fg_full = energy.full_mask(fg_free)
    a, n_bg = energy.cut_terms(fg_full)
    if flow + energy.const_cut != a + n_bg * lam_int:
        raise RuntimeError("flow value disagrees with the recomputed cut energy")
    return _solution(energy, fg_full, lam_int)


def solve_breakpoints(energy: SpatialEnergy, max_area: int | None = None,
                      coarsen_iou: float | None = None) -> list[CutSolution]:
    """All distinct minimal labelings as lam sweeps the range, ordered by lam.

    Consecutive solutions are nested (foreground grows with lam). Crossings
    of the two endpoint cost lines are computed exactly and probed on the
    integer lam grid; an interval whose grid endpoints share their canonical
    labeling contains no further grid-visible solution.

    The defaults enumerate everything. The two knobs prune by nesting, for
    callers that post-filter anyway: intervals whose left endpoint already
    exceeds `max_area` contain only larger solutions, and an interval whose
    endpoint areas satisfy |smaller| / |larger| >= `coarsen_iou` contains only
    solutions within that IoU of both endpoints (interior labelings are
    sandwiched between them).
    """
    res = energy.resolution
    g_lo = int(round(energy.lambda_range[0] * res))
    g_hi = int(round(energy.lambda_range[1] * res))
    if energy.n_free == 0:
        return [_solution(energy, energy.seed.copy(), g_lo)]

    records = {}  # packed fg_free -> [fg_full, lam_int, cut_a, n_bg, area]

    def solve(lam_int: int):
        fg_free, flow = energy._min_cut(lam_int)
        key = np.packbits(fg_free).tobytes()
        rec = records.get(key)
        if rec is None:
            fg_full = energy.full_mask(fg_free)
            a, n_bg = energy.cut_terms(fg_full)
            if flow + energy.const_cut != a + n_bg * lam_int:
                raise RuntimeError("flow value disagrees with the recomputed cut energy")
            records[key] = [fg_full, lam_int, a, n_bg, int(fg_full.sum())]
        elif lam_int < rec[1]:
            rec[1] = lam_int
        return key

    key_lo = solve(g_lo)
    key_hi = solve(g_hi) if g_hi > g_lo else key_lo
    stack = [(g_lo, key_lo, g_hi, key_hi)]
    while stack:
        ga, ka, gb, kb = stack.pop()
        if ka == kb or gb - ga <= 1:
            continue
        _, _, a_a, n_a, area_a = records[ka]
        _, _, a_b, n_b, area_b = records[kb]
        if max_area is not None and area_a > max_area:
            continue  # nesting: every interior solution is larger still
        if coarsen_iou is not None and area_a >= coarsen_iou * area_b:
            continue  # interior solutions all within coarsen_iou of endpoints
        if n_a == n_b:
            gm = (ga + gb) // 2  # identical cost lines; bisect
        else:
            crossing = Fraction(a_b - a_a, n_a - n_b)
            gm = int((2 * crossing.numerator + crossing.denominator)
                     // (2 * crossing.denominator))
            gm = min(max(gm, ga + 1), gb - 1)
        km = solve(gm)
        if km == ka:
            stack.append((gm, ka, gb, kb))
        elif km == kb:
            stack.append((ga, ka, gm, kb))
        else:
            stack.append((ga, ka, gm, km))
            stack.append((gm, km, gb, kb))

    ordered = sorted(records.values(), key=lambda rec: rec[4])
    return [
        CutSolution(mask=SegmentMask(fg), energy=(a + n_bg * lam_int) / res,
                    lam=lam_int / res)
        for fg, lam_int, a, n_bg, _ in ordered
    ]
