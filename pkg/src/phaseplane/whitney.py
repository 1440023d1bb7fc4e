"""Whitney families of frequency boxes away from the singular subspace.

Two constructions live here:

* :func:`build_whitney` - maximal disjoint family of boxes ``Q(xi, 2^-j)`` whose
  ``2^k0`` dilate misses Gamma while the ``2^(k0+1)`` dilate meets it, maximal
  relative to a per-scale lattice of candidate centres;
* :func:`build_symbol_cover` - disjoint boxes of radius ``2^-k0 * r_xi`` used
  for expanding a symbol supported away from Gamma.

Box intersection is decided in "scaled" coordinates where block ``n`` is divided
by ``2**v_n``; there every box is a sup-norm ball of radius ``r`` and two open
boxes meet iff their centres are closer than ``r + r'``.
"""
from __future__ import annotations

import json
import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMap, EmptyRange, SupportTouchesGamma
from ._kernels import blocked_mask, greedy_equal
from .geometry import Box, Gamma, gamma_box_intersects

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9
MAX_NODES = 20_000_000


def _scale_vec(v, d) -> np.ndarray:
    return np.repeat(np.exp2(np.asarray(v, dtype=float)), d)


def _distance_bounds(G: Gamma, c: np.ndarray, w: np.ndarray):
    """Lower/upper bounds of the box distance over axis boxes ``c +- w``."""
    F = G.functionals
    proj = np.abs(c @ F.T)
    spread = w @ np.abs(F).T
    return np.max(proj - spread, axis=1), np.max(proj + spread, axis=1)


def _enumerate_shell(G: Gamma, step: float, N: float, d_lo: float, d_hi: float, center=None) -> np.ndarray:
    """Lattice points ``i * step`` with ``|xi - center| <= N`` and ``d_lo <= dist < d_hi``.

    Branch and bound over boxes of lattice indices, pruning with the Lipschitz
    bounds of the box distance. Returns integer index vectors.
    """
    dim = 3 * G.d
    c0 = np.zeros(dim) if center is None else np.asarray(center, dtype=float).ravel()
    lo = np.ceil((c0 - N) / step).astype(np.int64)[None, :]
    hi = np.floor((c0 + N) / step).astype(np.int64)[None, :]
    if np.any(hi < lo):
        return np.zeros((0, dim), dtype=np.int64)
    leaves = []
    nodes = 0
    while lo.shape[0]:
        nodes += lo.shape[0]
        if nodes > MAX_NODES:
            raise RuntimeError("candidate enumeration exceeded node budget; reduce N or density")
        c = (lo + hi) * (step / 2.0)
        w = (hi - lo) * (step / 2.0)
        lb, ub = _distance_bounds(G, c, w)
        keep = (ub >= d_lo * (1 - TIE_RTOL)) & (lb < d_hi * (1 + TIE_RTOL))
        lo, hi = lo[keep], hi[keep]
        width = hi - lo
        is_leaf = ~np.any(width > 0, axis=1)
        if is_leaf.any():
            leaves.append(lo[is_leaf])
        lo, hi, width = lo[~is_leaf], hi[~is_leaf], width[~is_leaf]
        if not lo.shape[0]:
            break
        k = np.argmax(width, axis=1)
        rows = np.arange(lo.shape[0])
        mid = (lo[rows, k] + hi[rows, k]) // 2
        hi1 = hi.copy()
        hi1[rows, k] = mid
        lo2 = lo.copy()
        lo2[rows, k] = mid + 1
        lo = np.concatenate([lo, lo2])
        hi = np.concatenate([hi1, hi])
    if not leaves:
        return np.zeros((0, dim), dtype=np.int64)
    idx = np.concatenate(leaves)
    return idx[_exact_shell_mask(G, idx, step, d_lo, d_hi)]


def _exact_shell_mask(G: Gamma, idx: np.ndarray, step: float, d_lo: float, d_hi: float) -> np.ndarray:
    """Exact test ``d_lo <= dist(idx * step) < d_hi`` in integer arithmetic."""
    M, den = G.integer_functionals()
    lo, hi = Fraction(d_lo) / Fraction(step) * den, Fraction(d_hi) / Fraction(step) * den
    lo_i, hi_i = math.ceil(lo), math.ceil(hi)  # integer v: lo <= v < hi  <=>  lo_i <= v < hi_i
    bound = max(sum(abs(c) for c in row) for row in M) * (int(np.abs(idx).max(initial=0)) + 1)
    if bound < 2**62 and hi_i < 2**62:
        vals = np.max(np.abs(idx @ np.asarray(M, dtype=np.int64).T), axis=1)
    else:
        vals = np.max(np.abs(idx.astype(object) @ np.asarray(M, dtype=object).T), axis=1)
    return (vals >= lo_i) & (vals < hi_i)


def _lex_order(points: np.ndarray) -> np.ndarray:
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(points.T[::-1])


class _DisjointIndex:
    """Growing set of open sup-norm balls with batched intersection queries."""

    def __init__(self, dim: int):
        self.dim = dim
        self._frozen = []  # (tree, centres, radii)
        self._pending_c = []
        self._pending_r = []

    def _flush(self):
        if self._pending_c:
            c = np.asarray(self._pending_c)
            r = np.asarray(self._pending_r)
            self._frozen.append((cKDTree(c), c, r))
            self._pending_c, self._pending_r = [], []

    def hits(self, points: np.ndarray, radii: np.ndarray) -> np.ndarray:
        """Boolean mask: point-ball ``(p, r)`` meets some stored ball."""
        self._flush()
        out = np.zeros(points.shape[0], dtype=bool)
        for tree, c, r in self._frozen:
            rmax = r.max()
            lists = tree.query_ball_point(points, radii + rmax, p=np.inf)
            for i, nb in enumerate(lists):
                if out[i] or not nb:
                    continue
                nb = np.asarray(nb)
                gap = np.max(np.abs(c[nb] - points[i]), axis=1)
                if np.any(gap < radii[i] + r[nb]):
                    out[i] = True
        return out

    def add(self, point, radius):
        self._pending_c.append(np.asarray(point, dtype=float))
        self._pending_r.append(float(radius))


def greedy_disjoint(points: np.ndarray, radii: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Greedy maximal disjoint subfamily in the given order; returns chosen indices."""
    index = _DisjointIndex(points.shape[1])
    chosen = []
    for start in range(0, points.shape[0], chunk):
        P = points[start : start + chunk]
        R = radii[start : start + chunk]
        blocked = index.hits(P, R)
        local_c = np.zeros((0, points.shape[1]))
        local_r = np.zeros(0)
        for i in np.flatnonzero(~blocked):
            if local_r.size:
                gap = np.max(np.abs(local_c - P[i]), axis=1)
                if np.any(gap < R[i] + local_r):
                    continue
            local_c = np.vstack([local_c, P[i]])
            local_r = np.append(local_r, R[i])
            chosen.append(start + i)
            index.add(P[i], R[i])
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class WhitneyFamily:
    members: list
    scales: list
    params: dict
    audit: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.members)

    def truncate(self, N: float) -> "WhitneyFamily":
        keep = [
            i
            for i, (Q, j) in enumerate(zip(self.members, self.scales))
            if np.max(np.abs(Q.center)) <= N and abs(j) <= N
        ]
        return WhitneyFamily(
            [self.members[i] for i in keep],
            [self.scales[i] for i in keep],
            dict(self.params, N=N),
            dict(self.audit),
        )

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "members": [
                {"xi": Q.center.tolist(), "j": int(j), "radius": Q.radius}
                for Q, j in zip(self.members, self.scales)
            ],
            "audit": self.audit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, v) -> "WhitneyFamily":
        members = [Box(np.asarray(m["xi"], float), float(m["radius"]), tuple(v)) for m in data["members"]]
        return cls(members, [int(m["j"]) for m in data["members"]], dict(data["params"]), dict(data.get("audit", {})))

    def scale_histogram(self) -> dict:
        hist = {}
        for j in self.scales:
            hist[j] = hist.get(j, 0) + 1
        return dict(sorted(hist.items()))


def candidate_step(j: int, lattice_density: int) -> float:
    """Lattice spacing at scale ``j``: ``lattice_density`` centres per box side ``2 * 2^-j``."""
    return math.ldexp(2.0, -j) / lattice_density


def whitney_candidates(G: Gamma, k0: int, j: int, N: float, lattice_density: int, center=None) -> np.ndarray:
    """All lattice centres at scale ``j`` meeting both gap conditions, lexicographic order."""
    step = candidate_step(j, lattice_density)
    d_lo = math.ldexp(1.0, k0 - j)
    idx = _enumerate_shell(G, step, N, d_lo, 2 * d_lo, center)
    pts = idx * step
    return pts[_lex_order(pts)]


def build_whitney(
    G: Gamma,
    k0: int,
    j_range,
    N: float,
    lattice_density: int = 8,
    verify: bool = True,
    center=None,
) -> WhitneyFamily:
    """Greedy maximal family over lattice candidates, largest boxes first.

    Candidates at scale ``j`` are centres in ``(2^(1-j) / lattice_density) Z^(3d)``
    with ``|xi|_inf <= N``.  ``Gamma cap Q(xi, 2^(k0-j))`` empty and
    ``Gamma cap Q(xi, 2^(k0+1-j))`` nonempty are equivalent to
    ``2^(k0-j) <= dist(xi) < 2^(k0+1-j)`` for the box distance.
    With ``verify`` every member is re-checked by exact polygon/interval clipping.
    ``center`` moves the truncation window to ``|xi - center|_inf <= N`` (default 0).
    """
    j_lo, j_hi = int(j_range[0]), int(j_range[1])
    if j_lo > j_hi:
        raise EmptyRange(f"empty scale range {j_range}")
    if k0 < 3:
        raise ValueError("k0 must be at least 3")
    if lattice_density < 4 or lattice_density & (lattice_density - 1):
        raise ValueError("lattice_density must be a power of two >= 4")
    if G.functionals.size == 0:
        raise DegenerateMap("Gamma has no separating functionals")
    bm = G.parent
    d = bm.d
    sv = _scale_vec(bm.v, d)
    by_scale = {}
    members, scales = [], []
    audit = {"candidates": {}, "accepted": {}, "overlap_rejected": {}}
    for j in range(j_lo, j_hi + 1):
        pts = whitney_candidates(G, k0, j, N, lattice_density, center)
        r = math.ldexp(1.0, -j)
        scaled = pts / sv
        blocked = np.zeros(pts.shape[0], dtype=bool)
        for jm, (cm, rm) in by_scale.items():
            blocked_mask(scaled, r, cm, rm, out=blocked)
        chosen = np.flatnonzero(greedy_equal(scaled, r, blocked))
        if chosen.size:
            by_scale[j] = (scaled[chosen], r)
        for i in chosen:
            members.append(Box(pts[i].reshape(3, d), r, bm.v))
            scales.append(j)
        audit["candidates"][str(j)] = int(pts.shape[0])
        audit["accepted"][str(j)] = int(chosen.size)
        audit["overlap_rejected"][str(j)] = int(pts.shape[0] - chosen.size)
        log.debug("scale %d: %d candidates, %d accepted", j, pts.shape[0], chosen.size)
    fam = WhitneyFamily(
        members,
        scales,
        {
            "k0": k0,
            "j_range": [j_lo, j_hi],
            "N": N,
            "lattice_density": lattice_density,
            "center": None if center is None else np.asarray(center, float).reshape(3, d).tolist(),
        },
        audit,
    )
    if verify:
        bad = gap_violations(G, fam)
        if bad:
            raise AssertionError(f"{len(bad)} members violate the gap conditions")
    return fam


def gap_violations(G: Gamma, fam: WhitneyFamily) -> list:
    """Indices of members failing either gap condition (exact clipping test)."""
    k0 = fam.params["k0"]
    bad = []
    for i, Q in enumerate(fam.members):
        if gamma_box_intersects(G, Q.dilate(2.0**k0)):
            bad.append(i)
        elif not gamma_box_intersects(G, Q.dilate(2.0 ** (k0 + 1))):
            bad.append(i)
    return bad


def _member_arrays(fam: WhitneyFamily, v, d):
    sv = _scale_vec(v, d)
    if not fam.members:
        return np.zeros((0, 3 * d)), np.zeros(0)
    c = np.array([Q.center.ravel() for Q in fam.members]) / sv
    r = np.array([Q.radius for Q in fam.members])
    return c, r


def pairwise_overlaps(fam: WhitneyFamily) -> list:
    """Pairs of members whose open boxes intersect (should be empty)."""
    if not fam.members:
        return []
    Q0 = fam.members[0]
    c, r = _member_arrays(fam, Q0.v, Q0.d)
    tree = cKDTree(c)
    pairs = tree.query_pairs(2 * r.max(), p=np.inf, output_type="ndarray")
    out = []
    for a, b in pairs:
        if np.max(np.abs(c[a] - c[b])) < r[a] + r[b]:
            out.append((int(a), int(b)))
    return out


def maximality_violations(G: Gamma, fam: WhitneyFamily) -> list:
    """Lattice candidates that satisfy both gap conditions and miss every member.

    Only members of the same or coarser scale are consulted, which is the
    stronger statement (finer members did not exist when a scale was filled).
    """
    p = fam.params
    bm = G.parent
    d = bm.d
    sv = _scale_vec(bm.v, d)
    groups = {}
    for Q, j in zip(fam.members, fam.scales):
        groups.setdefault(j, []).append(Q.center.ravel() / sv)
    bad = []
    for j in range(p["j_range"][0], p["j_range"][1] + 1):
        pts = whitney_candidates(G, p["k0"], j, p["N"], p["lattice_density"], p.get("center"))
        r = math.ldexp(1.0, -j)
        hit = np.zeros(pts.shape[0], dtype=bool)
        for jm, cs in groups.items():
            if jm <= j:
                blocked_mask(pts / sv, r, np.asarray(cs), math.ldexp(1.0, -jm), out=hit)
        bad.extend((j, pts[i].tolist()) for i in np.flatnonzero(~hit))
    return bad


def overlap_statistics(family, k: float, n_random: int = 0, rng=None) -> int:
    """Maximum number of dilates ``2^k Q`` containing a common probe point.

    ``family`` is a :class:`WhitneyFamily`, a :class:`SymbolCover` or a list of
    boxes.  Probes: member centres and corners, plus ``n_random`` uniform points
    in the bounding box.
    """
    boxes = list(getattr(family, "members", family))
    if not boxes:
        return 0
    d = boxes[0].d
    sv = _scale_vec(boxes[0].v, d)
    c = np.array([Q.center.ravel() for Q in boxes]) / sv
    r = np.array([Q.radius for Q in boxes]) * 2.0**k
    corners = []
    signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * (3 * d), indexing="ij")).reshape(3 * d, -1).T
    r0 = r / 2.0**k
    for ci, ri in zip(c, r0):
        corners.append(ci + 0.999 * ri * signs)
    probes = [c] + corners
    if n_random:
        rng = rng or np.random.default_rng(0)
        lo, hi = (c - r[:, None]).min(axis=0), (c + r[:, None]).max(axis=0)
        probes.append(rng.uniform(lo, hi, size=(n_random, 3 * d)))
    probes = np.vstack(probes)
    tree = cKDTree(c)
    lists = tree.query_ball_point(probes, r.max(), p=np.inf)
    best = 0
    for p, nb in zip(probes, lists):
        if len(nb) <= best:
            continue
        nb = np.asarray(nb)
        cnt = int(np.sum(np.max(np.abs(c[nb] - p), axis=1) < r[nb]))
        best = max(best, cnt)
    return best


@dataclass
class SymbolCover:
    members: list
    k0: int
    support: Box
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.members)

    def to_dict(self) -> dict:
        return {
            "k0": self.k0,
            "support": self.support.to_dict(),
            "members": [{"xi": Q.center.tolist(), "radius": Q.radius} for Q in self.members],
            "stats": self.stats,
        }


def whitney_radius(G: Gamma, xi) -> np.ndarray:
    """``r_xi = (3/4) inf{r : Q(xi, r) meets Gamma}``, vectorized."""
    return 0.75 * G.box_distance(xi)


def whitney_radius_bisect(G: Gamma, xi, rtol: float = 2.0**-20) -> float:
    """Bisection version of :func:`whitney_radius` using the exact clipping test."""
    from .geometry import Box

    bm = G.parent
    xi = np.asarray(xi, dtype=float).reshape(3, bm.d)
    hi = 1.0
    while not gamma_box_intersects(G, Box(xi, hi, bm.v)):
        hi *= 2.0
        if hi > 1e12:
            raise SupportTouchesGamma("no finite radius meets Gamma")
    lo = 0.0
    while hi - lo > rtol * hi:
        mid = (lo + hi) / 2
        if mid > 0 and gamma_box_intersects(G, Box(xi, mid, bm.v)):
            hi = mid
        else:
            lo = mid
    return 0.75 * hi


def build_symbol_cover(
    G: Gamma, m_support: Box, k0: int, density: int = 1, probes: int = 4000, seed: int = 0
) -> SymbolCover:
    """Maximal disjoint family of ``Q(xi, 2^-k0 r_xi)`` whose 5-fold dilates cover ``m_support``.

    Candidate centres form a dyadic lattice inside the closed support box with
    scaled spacing at most ``min radius / density``; selection is greedy by
    decreasing radius with lexicographic tie-break.  Any support point lies
    within half a spacing of a candidate, whose box meets a chosen box of at
    least the same radius, so it lies in the 5-fold dilate of that box.
    """
    bm = G.parent
    d = bm.d
    sv = _scale_vec(bm.v, d)
    c0 = m_support.center.ravel()
    hw = np.repeat(m_support.half_widths(), d)
    lb, ub = _distance_bounds(G, c0[None, :], hw[None, :])
    if lb[0] <= 0:
        raise SupportTouchesGamma("support box meets or touches Gamma")
    r_min = 2.0**-k0 * 0.75 * lb[0]
    step = math.ldexp(1.0, math.floor(math.log2(r_min / density))) * sv
    lo, hi = c0 - hw, c0 + hw
    axes = [np.arange(math.ceil(l / s), math.floor(h / s) + 1) * s for l, h, s in zip(lo, hi, step)]
    if any(a.size == 0 for a in axes):
        axes = [np.array([c]) for c in c0]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3 * d)
    radii = 2.0**-k0 * whitney_radius(G, grid.reshape(-1, 3, d))
    order = np.lexsort(np.vstack([grid.T[::-1], -radii]))
    grid, radii = grid[order], radii[order]
    chosen = greedy_disjoint(grid / sv, radii)
    members = [Box(grid[i].reshape(3, d), float(radii[i]), bm.v) for i in chosen]
    cover = SymbolCover(members, k0, m_support)
    rng = np.random.default_rng(seed)
    samples = rng.uniform(c0 - hw, c0 + hw, size=(probes, 3 * d))
    cover.stats = {
        "candidates": int(grid.shape[0]),
        "members": len(members),
        "uncovered_samples": int(np.sum(~covered_by(cover, samples, 5.0))),
        "overlap": {str(k): overlap_statistics(members, k) for k in range(0, min(k0, 3) + 1)},
    }
    return cover


def covered_by(cover, points: np.ndarray, factor: float) -> np.ndarray:
    """Mask of points (flattened, shape (P, 3d)) inside some ``factor * Q``."""
    boxes = list(getattr(cover, "members", cover))
    if not boxes:
        return np.zeros(points.shape[0], dtype=bool)
    d = boxes[0].d
    sv = _scale_vec(boxes[0].v, d)
    c = np.array([Q.center.ravel() for Q in boxes]) / sv
    r = np.array([Q.radius for Q in boxes]) * factor
    tree = cKDTree(c)
    pts = points / sv
    lists = tree.query_ball_point(pts, r.max(), p=np.inf)
    out = np.zeros(points.shape[0], dtype=bool)
    for i, nb in enumerate(lists):
        if nb:
            nb = np.asarray(nb)
            out[i] = bool(np.any(np.max(np.abs(c[nb] - pts[i]), axis=1) < r[nb]))
    return out
