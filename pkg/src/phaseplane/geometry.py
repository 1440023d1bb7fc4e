"""Block maps, the singular subspace, frequency boxes and dyadic cubes.

Conventions used throughout the package:

* a point of the frequency space R^{3 x d} is an array of shape ``(3, d)``;
  row ``n`` is the block ``xi_n``;
* block indices are 0-based (``0, 1, 2``);
* boxes are open, dyadic cubes are half-open ``2^k([0,1)^d + l)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySet, NotNonTrivial, NotQuasiconformal, Singular

QC_RTOL = 1e-12


def op_norm(A) -> float:
    """Operator norm of a 1x1 or 2x2 real matrix (closed form)."""
    A = np.asarray(A, dtype=float)
    if A.shape == (1, 1):
        return abs(float(A[0, 0]))
    if A.shape == (2, 2):
        fro2 = float(np.sum(A * A))
        det = float(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])
        disc = max(fro2 * fro2 - 4.0 * det * det, 0.0)
        return math.sqrt((fro2 + math.sqrt(disc)) / 2.0)
    raise ValueError(f"unsupported block shape {A.shape}")


def ceil_log2(x: float) -> int:
    """Smallest integer v with x <= 2**v, computed exactly."""
    if x <= 0:
        raise ValueError("ceil_log2 needs a positive argument")
    mant, exp = math.frexp(x)
    return exp - 1 if mant == 0.5 else exp


def _det(A: np.ndarray) -> float:
    if A.shape == (1, 1):
        return float(A[0, 0])
    return float(A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BlockMap:
    """Validated and normalized triple ``(L_1, L_2, L_3)``.

    ``L`` holds the *normalized* blocks (rescaled by ``scale`` so that
    ``v[n_star] == 0``); ``raw`` keeps the blocks as given.
    """

    d: int
    L: np.ndarray
    K: float
    v: tuple
    n_star: int
    scale: float = 1.0
    raw: np.ndarray = field(default=None, repr=False)

    @property
    def gamma(self) -> "Gamma":
        return Gamma(self)

    def inverse_blocks(self) -> np.ndarray:
        return np.stack([np.linalg.inv(self.L[n]) for n in range(3)])

    def apply(self, eta) -> np.ndarray:
        """Map ``eta`` (shape (..., 3, d)) to ``L eta`` blockwise."""
        eta = np.asarray(eta, dtype=float)
        return np.einsum("nij,...nj->...ni", self.L, eta)

    def apply_inverse(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return np.einsum("nij,...nj->...ni", self.inverse_blocks(), xi)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "L": self.raw.tolist() if self.raw is not None else self.L.tolist(),
            "K": self.K,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BlockMap":
        L = np.asarray(data["L"], dtype=float)
        d = int(data.get("d", L.shape[-1] if L.ndim == 3 else 1))
        L = L.reshape(3, d, d)
        return validate_block_map(L[0], L[1], L[2], float(data.get("K", 1.0)))


def validate_block_map(L1, L2, L3, K: float = 1.0, normalize: bool = True) -> BlockMap:
    """Check the non-triviality and quasiconformality conditions.

    The quasiconformality inequality is tested as ``||L_n||^d <= K |det L_n|``.
    With ``normalize`` the blocks are multiplied by ``2**-min(v)`` so that the
    smallest ``v_n`` is zero.
    """
    blocks = []
    for M in (L1, L2, L3):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        blocks.append(M)
    d = blocks[0].shape[0]
    if d not in (1, 2) or any(M.shape != (d, d) for M in blocks):
        raise ValueError("blocks must be square matrices of equal dimension 1 or 2")
    if K < 1:
        raise NotQuasiconformal(f"K must be >= 1, got {K}")
    raw = np.stack(blocks)
    if np.any(raw[0] + raw[1] + raw[2] != 0):
        raise NotNonTrivial("L_1 + L_2 + L_3 must vanish")
    norms, dets = [], []
    for n, M in enumerate(blocks):
        det = _det(M)
        if det == 0:
            raise Singular(f"block {n} is singular")
        norm = op_norm(M)
        if norm**d > K * abs(det) * (1 + QC_RTOL):
            raise NotQuasiconformal(
                f"block {n}: ||L||^d = {norm ** d:.6g} exceeds K|det| = {K * abs(det):.6g}"
            )
        norms.append(norm)
        dets.append(det)
    v = [ceil_log2(x) for x in norms]
    n_star = int(np.argmin(v))
    scale = 1.0
    if normalize:
        shift = v[n_star]
        scale = math.ldexp(1.0, -shift)
        v = [vn - shift for vn in v]
    return BlockMap(
        d=d,
        L=_frozen(raw * scale),
        K=float(K),
        v=tuple(int(x) for x in v),
        n_star=n_star,
        scale=scale,
        raw=_frozen(raw),
    )


def _frac(x) -> Fraction:
    return Fraction(float(x))


class Gamma:
    """The subspace ``{(L_1 tau, L_2 tau, L_3 tau)}`` with box-metric tools.

    The box distance ``dist(xi) = inf{r : Q(xi, r) meets Gamma}`` is the value of
    a weighted Chebyshev problem in ``tau``.  By LP duality it equals
    ``max_S |l_S . xi|`` over finitely many linear functionals ``l_S`` supported
    on row subsets of size at most ``d + 1``; these are precomputed once, both in
    floating point and as exact fractions.
    """

    def __init__(self, block_map: BlockMap):
        self.parent = block_map
        self.d = block_map.d
        self._rows = block_map.L.reshape(3 * self.d, self.d)
        self._weights_exp = np.repeat(np.asarray(block_map.v), self.d)
        self._exact_functionals = self._build_functionals()
        self.functionals = np.array(
            [[float(c) for c in f] for f in self._exact_functionals], dtype=float
        )

    def _build_functionals(self) -> list:
        d = self.d
        rows = [[_frac(x) for x in r] for r in self._rows]
        scales = [Fraction(2) ** int(e) for e in self._weights_exp]
        m = len(rows)
        out = []
        seen = set()

        def push(support, lam):
            if all(x == 0 for x in lam):
                return
            den = sum(abs(x) * scales[i] for i, x in zip(support, lam))
            vec = [Fraction(0)] * m
            for i, x in zip(support, lam):
                vec[i] = x / den
            # canonical sign
            first = next(x for x in vec if x != 0)
            if first < 0:
                vec = [-x for x in vec]
            key = tuple(vec)
            if key not in seen:
                seen.add(key)
                out.append(vec)

        for i, j in itertools.combinations(range(m), 2):
            a, b = rows[i], rows[j]
            if d == 1 or a[0] * b[1] - a[1] * b[0] == 0:
                k = next((k for k in range(d) if a[k] != 0 or b[k] != 0), None)
                if k is None:
                    continue
                push((i, j), (b[k], -a[k]))
        if d == 2:
            for S in itertools.combinations(range(m), 3):
                c1 = [rows[i][0] for i in S]
                c2 = [rows[i][1] for i in S]
                lam = (
                    c1[1] * c2[2] - c1[2] * c2[1],
                    c1[2] * c2[0] - c1[0] * c2[2],
                    c1[0] * c2[1] - c1[1] * c2[0],
                )
                push(S, lam)
        return out

    def integer_functionals(self):
        """``(M, D)`` with integer ``M = D * functionals`` exactly (``D`` a common denominator)."""
        den = 1
        for f in self._exact_functionals:
            for c in f:
                den = den * c.denominator // math.gcd(den, c.denominator)
        M = [[int(c * den) for c in f] for f in self._exact_functionals]
        return M, den

    def point(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float).reshape(-1, self.d)
        pts = np.einsum("nij,tj->tni", self.parent.L, tau)
        return pts[0] if pts.shape[0] == 1 else pts

    def box_distance(self, xi) -> np.ndarray:
        """Vectorized box distance; ``xi`` has shape (..., 3, d)."""
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(xi.shape[:-2] + (3 * self.d,))
        return np.max(np.abs(flat @ self.functionals.T), axis=-1)

    def box_distance_exact(self, xi) -> Fraction:
        flat = [_frac(x) for x in np.asarray(xi, dtype=float).ravel()]
        return max(abs(sum(c * x for c, x in zip(f, flat))) for f in self._exact_functionals)

    def nearest(self, xi) -> np.ndarray:
        """A point of Gamma closest to ``xi`` in the box metric."""
        xi = np.asarray(xi, dtype=float).reshape(3, self.d)
        A = self._rows
        b = xi.ravel()
        w = np.exp2(-self._weights_exp.astype(float))
        if self.d == 1:
            a = A[:, 0]
            cands = [b[i] / a[i] for i in range(3)]
            for i, j in itertools.combinations(range(3), 2):
                for s in (1.0, -1.0):
                    den = w[i] * a[i] - s * w[j] * a[j]
                    if den != 0:
                        cands.append((w[i] * b[i] - s * w[j] * b[j]) / den)
            cands = np.array(sorted(cands))
            vals = np.max(w[None, :] * np.abs(np.outer(cands, a) - b[None, :]), axis=1)
            tau = np.array([cands[int(np.argmin(vals))]])
        else:
            from scipy.optimize import linprog

            m = A.shape[0]
            # variables (tau_1, tau_2, t); minimize t
            A_ub = np.vstack(
                [
                    np.hstack([w[:, None] * A, -np.ones((m, 1))]),
                    np.hstack([-w[:, None] * A, -np.ones((m, 1))]),
                ]
            )
            b_ub = np.concatenate([w * b, -w * b])
            res = linprog(
                c=[0, 0, 1], A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * 3, method="highs"
            )
            tau = res.x[:2]
        return self.point(tau)


@dataclass(frozen=True, eq=False)
class Box:
    """Open product box ``Q(xi, r) = Q_1 x Q_2 x Q_3``.

    ``Q_n`` is the cube of half-width ``2**v_n * r`` centred at ``xi_n``.
    """

    center: np.ndarray
    radius: float
    v: tuple

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center))
        if self.radius <= 0:
            raise ValueError("box radius must be positive")

    @property
    def d(self) -> int:
        return self.center.shape[1]

    def half_widths(self) -> np.ndarray:
        return np.exp2(np.asarray(self.v, dtype=float)) * self.radius

    def block(self, n: int):
        h = self.half_widths()[n]
        return self.center[n] - h, self.center[n] + h

    def dilate(self, a: float) -> "Box":
        return Box(self.center, self.radius * a, self.v)

    def contains(self, xi) -> bool:
        xi = np.asarray(xi, dtype=float).reshape(3, self.d)
        h = self.half_widths()[:, None]
        return bool(np.all(np.abs(xi - self.center) < h))

    def block_contains(self, n: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all(np.abs(x - self.center[n]) < self.half_widths()[n], axis=-1)

    def intersects(self, other: "Box") -> bool:
        h = (self.half_widths() + other.half_widths())[:, None]
        return bool(np.all(np.abs(self.center - other.center) < h))

    def block_volume(self, n: int) -> float:
        return float((2 * self.half_widths()[n]) ** self.d)

    def key(self) -> tuple:
        return (tuple(self.center.ravel().tolist()), self.radius)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "radius": self.radius, "v": list(self.v)}

    @classmethod
    def from_dict(cls, data: dict) -> "Box":
        return cls(np.asarray(data["center"], dtype=float), float(data["radius"]), tuple(data["v"]))


def make_box(block_map: BlockMap, center, radius: float) -> Box:
    center = np.asarray(center, dtype=float).reshape(3, block_map.d)
    return Box(center, float(radius), block_map.v)


@dataclass(frozen=True, order=True)
class DyadicCube:
    """The half-open cube ``2**scale * ([0,1)^d + corner)``."""

    scale: int
    corner: tuple

    @property
    def d(self) -> int:
        return len(self.corner)

    @property
    def side(self) -> float:
        return math.ldexp(1.0, self.scale)

    @property
    def volume(self) -> float:
        return self.side**self.d

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.corner, dtype=float) * self.side

    @property
    def center(self) -> np.ndarray:
        return self.lower + self.side / 2

    def contains_point(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        lo = self.lower
        return bool(np.all((lo <= x) & (x < lo + self.side)))

    def contains(self, other: "DyadicCube") -> bool:
        if other.scale > self.scale:
            return False
        shift = self.scale - other.scale
        return all((c >> shift) == s for c, s in zip(other.corner, self.corner))

    def ancestor(self, scale: int) -> "DyadicCube":
        if scale < self.scale:
            raise ValueError("ancestor scale must not be finer")
        shift = scale - self.scale
        return DyadicCube(scale, tuple(c >> shift for c in self.corner))

    def parent(self) -> "DyadicCube":
        return self.ancestor(self.scale + 1)

    def children(self) -> list:
        base = tuple(2 * c for c in self.corner)
        return [
            DyadicCube(self.scale - 1, tuple(b + o for b, o in zip(base, offs)))
            for offs in itertools.product((0, 1), repeat=self.d)
        ]

    def to_dict(self) -> dict:
        return {"scale": self.scale, "corner": list(self.corner)}

    @classmethod
    def from_dict(cls, data: dict) -> "DyadicCube":
        return cls(int(data["scale"]), tuple(int(c) for c in data["corner"]))


@dataclass(frozen=True)
class Cube:
    """Arbitrary axis-parallel cube given by centre and side length."""

    center: np.ndarray
    side: float


def cube_from_interval(lo, side: float) -> Cube:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    return Cube(lo + side / 2, float(side))


def rho(I, x) -> np.ndarray:
    """Mollified distance ``inf{r > 1 : x in (2r - 1) I}`` (vectorized in ``x``)."""
    c = np.atleast_1d(np.asarray(I.center, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != c.shape[0]:
        x = x[..., None] if c.shape[0] == 1 else x
    dist = np.max(np.abs(x - c), axis=-1)
    return np.maximum(1.0, (2.0 * dist / I.side + 1.0) / 2.0)


def rho_set(I, points: Iterable) -> float:
    pts = np.asarray(list(points), dtype=float)
    if pts.size == 0:
        raise EmptySet("rho_set needs a nonempty point set")
    return float(np.min(rho(I, pts)))


def _clip(poly: list, a: Sequence[Fraction], b: Fraction) -> list:
    """Sutherland-Hodgman clip of a convex polygon by ``a . p <= b``."""
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        fp = a[0] * p[0] + a[1] * p[1] - b
        fq = a[0] * q[0] + a[1] * q[1] - b
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _area2(poly: list) -> Fraction:
    s = Fraction(0)
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        s += p[0] * q[1] - q[0] * p[1]
    return abs(s)


def gamma_box_witness(G: Gamma, Q: Box):
    """Exact witness ``tau`` with ``L_n tau in Q_n`` for all ``n``, or ``None``.

    d = 1 intersects three open intervals; d = 2 clips the parallelogram
    ``L_1^{-1} closure(Q_1)`` by the remaining slabs and tests for positive
    area.  All arithmetic is in exact fractions.
    """
    L = G.parent.L
    h = [Fraction(2) ** int(vn) * _frac(Q.radius) for vn in Q.v]
    c = [[_frac(x) for x in row] for row in Q.center]
    if G.d == 1:
        lo, hi = None, None
        for n in range(3):
            a = _frac(L[n, 0, 0])
            e1, e2 = (c[n][0] - h[n]) / a, (c[n][0] + h[n]) / a
            e1, e2 = min(e1, e2), max(e1, e2)
            lo = e1 if lo is None else max(lo, e1)
            hi = e2 if hi is None else min(hi, e2)
        if lo < hi:
            return np.array([float((lo + hi) / 2)])
        return None
    A0 = [[_frac(x) for x in row] for row in L[0]]
    det = A0[0][0] * A0[1][1] - A0[0][1] * A0[1][0]
    inv = [[A0[1][1] / det, -A0[0][1] / det], [-A0[1][0] / det, A0[0][0] / det]]
    poly = []
    for s1, s2 in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        y = (c[0][0] + s1 * h[0], c[0][1] + s2 * h[0])
        poly.append((inv[0][0] * y[0] + inv[0][1] * y[1], inv[1][0] * y[0] + inv[1][1] * y[1]))
    for n in (1, 2):
        for i in range(2):
            row = [_frac(x) for x in L[n, i]]
            poly = _clip(poly, row, c[n][i] + h[n])
            if not poly:
                return None
            poly = _clip(poly, [-row[0], -row[1]], -(c[n][i] - h[n]))
            if not poly:
                return None
    if len(poly) < 3 or _area2(poly) == 0:
        return None
    cx = sum(p[0] for p in poly) / len(poly)
    cy = sum(p[1] for p in poly) / len(poly)
    return np.array([float(cx), float(cy)])


def gamma_box_intersects(G: Gamma, Q: Box) -> bool:
    """Exact test whether the open box ``Q`` meets ``Gamma``."""
    return gamma_box_witness(G, Q) is not None
