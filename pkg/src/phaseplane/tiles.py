"""Multitiles, trees and the size functionals.

A multitile pairs a dyadic spatial cube ``I`` with a Whitney box ``Q`` whose
narrowest projection is dual to ``I``.  A tree is fixed by a frequency point on
Gamma, a top cube and the tile collection it lives in; everything attached to
it (its tiles, its boundary tiles, its family of intermediate cubes) is
computed by direct membership tests.

Sizes are suprema over cut-off classes.  We evaluate them over a finite,
documented dictionary of verified class members (see :class:`CutoffDictionary`),
so every value returned here is a lower bound for the class supremum.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import EmptyDictionary, InvalidTree, UnverifiedCutoff
from .geometry import Box, DyadicCube, Gamma, gamma_box_intersects, rho
from .wavepackets import CutoffSpec, Grid, SampledField, _bump_spectrum, majorant, normalization, verify_membership
from .whitney import WhitneyFamily


@dataclass(frozen=True)
class TileParams:
    """Gap constants ``k0 < k1 < k2`` and the decay exponent ``alpha``."""

    k0: int = 3
    k1: int = 4
    k2: int = 5
    alpha: float = 2.5

    def __post_init__(self):
        if not 3 <= self.k0 < self.k1 < self.k2:
            raise ValueError("need 3 <= k0 < k1 < k2")

    @classmethod
    def from_gap(cls, gap: int, d: int, k0: int = 3, alpha: float | None = None) -> "TileParams":
        """``k1 = k0 + gap``, ``k2 = k1 + gap``; default alpha is ``2d + 1/2``."""
        a = 2.0 * d + 0.5 if alpha is None else alpha
        return cls(k0, k0 + gap, k0 + 2 * gap, a)

    def to_dict(self) -> dict:
        return {"k0": self.k0, "k1": self.k1, "k2": self.k2, "alpha": self.alpha}


# ---------------------------------------------------------------- multitiles


def dual_scale(Q: Box) -> int:
    """Scale ``e`` with ``|Q_{n*}|^{-1} = 2^{e d}``, ``n*`` the narrowest block."""
    v = min(Q.v)
    side = 2.0 * math.ldexp(Q.radius, v)
    e = -math.log2(side)
    k = round(e)
    if abs(e - k) > 1e-9:
        raise ValueError("box radius is not a power of two")
    return int(k)


@dataclass(frozen=True, eq=False)
class Multitile:
    I: DyadicCube
    Q: Box

    def key(self) -> tuple:
        return (self.I.scale, self.I.corner, self.Q.key())

    def __eq__(self, other):
        return isinstance(other, Multitile) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def to_dict(self) -> dict:
        return {"I": self.I.to_dict(), "Q": self.Q.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Multitile":
        return cls(DyadicCube.from_dict(data["I"]), Box.from_dict(data["Q"]))


def phase_space_window(N: float, Nprime: float) -> float:
    """Spatial half-width ``N' 2^N`` of the tile window."""
    return float(Nprime) * 2.0 ** float(N)


def cubes_in_window(scale: int, half_width: float, d: int) -> list:
    """Dyadic cubes of the given scale inside ``[-half_width, half_width]^d``."""
    side = math.ldexp(1.0, scale)
    lo = math.ceil(-half_width / side)
    hi = math.floor(half_width / side) - 1
    if hi < lo:
        return []
    return [DyadicCube(scale, c) for c in itertools.product(range(lo, hi + 1), repeat=d)]


def build_multitiles(W: WhitneyFamily, half_width: float) -> list:
    """All pairs ``(I, Q)`` with ``Q`` in the family, ``I`` dual to ``Q`` and inside the window."""
    out = []
    cache = {}
    for Q in W.members:
        e = dual_scale(Q)
        if e not in cache:
            cache[e] = cubes_in_window(e, half_width, Q.d)
        out.extend(Multitile(I, Q) for I in cache[e])
    return out


class TileSet:
    """An ordered, immutable multitile collection with vectorized membership data."""

    def __init__(self, tiles):
        self.tiles = tuple(tiles)
        t = self.tiles
        self.index = {P.key(): i for i, P in enumerate(t)}
        if t:
            d = t[0].I.d
            self.centers = np.stack([P.Q.center for P in t])
            self.hw = np.stack([P.Q.half_widths() for P in t])
            self.scales = np.array([P.I.scale for P in t], dtype=int)
            self.corners = np.array([P.I.corner for P in t], dtype=np.int64).reshape(len(t), d)
        else:
            self.centers = np.zeros((0, 3, 1))
            self.hw = np.zeros((0, 3))
            self.scales = np.zeros(0, dtype=int)
            self.corners = np.zeros((0, 1), dtype=np.int64)

    def __len__(self):
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)

    def __contains__(self, P):
        return P.key() in self.index

    def in_dilate(self, xi, k: int) -> np.ndarray:
        """Mask of tiles with ``xi`` in ``2^k Q_P`` (open boxes)."""
        if not self.tiles:
            return np.zeros(0, dtype=bool)
        xi = np.asarray(xi, dtype=float).reshape(1, 3, -1)
        h = np.ldexp(self.hw, k)[:, :, None]
        return np.all(np.abs(xi - self.centers) < h, axis=(1, 2))

    def inside(self, I: DyadicCube) -> np.ndarray:
        """Mask of tiles with ``I_P`` contained in ``I``."""
        if not self.tiles:
            return np.zeros(0, dtype=bool)
        shift = I.scale - self.scales
        ok = shift >= 0
        sh = np.where(ok, shift, 0)[:, None]
        anc = np.right_shift(self.corners, sh)
        return ok & np.all(anc == np.asarray(I.corner, dtype=np.int64)[None, :], axis=1)

    def without(self, removed) -> "TileSet":
        keys = {P.key() for P in removed}
        return TileSet([P for P in self.tiles if P.key() not in keys])

    def to_list(self) -> list:
        return [P.to_dict() for P in self.tiles]


def as_tileset(V) -> TileSet:
    return V if isinstance(V, TileSet) else TileSet(V)


def save_tiles(path, tiles, extra: dict | None = None) -> None:
    data = dict(extra or {})
    data["tiles"] = [P.to_dict() for P in tiles]
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_tiles(path) -> tuple:
    with open(path) as fh:
        data = json.load(fh)
    return [Multitile.from_dict(t) for t in data["tiles"]], data


# ---------------------------------------------------------------- trees


@dataclass(frozen=True)
class TreeParts:
    tiles: tuple
    boundary: tuple
    family: tuple


@dataclass(frozen=True, eq=False)
class Tree:
    """Tree ``T(xi_T, I_T, V)``; build it with :func:`make_tree` to get validation."""

    xi: np.ndarray
    top: DyadicCube
    V: TileSet
    params: TileParams

    @property
    def j(self) -> int:
        return self.top.scale

    @property
    def v(self) -> tuple:
        return self.V.tiles[0].Q.v

    def key(self) -> tuple:
        return (tuple(np.asarray(self.xi).ravel().tolist()), self.top.scale, self.top.corner)

    @cached_property
    def _masks(self):
        inside = self.V.inside(self.top)
        outer = inside & self.V.in_dilate(self.xi, self.params.k2 + 1)
        core = outer & self.V.in_dilate(self.xi, self.params.k1 + 1)
        return outer, outer & ~core, core

    @cached_property
    def parts(self) -> TreeParts:
        outer, bdry, core = self._masks
        t = self.V.tiles
        P_T = tuple(t[i] for i in np.flatnonzero(outer))
        B_T = tuple(t[i] for i in np.flatnonzero(bdry))
        return TreeParts(P_T, B_T, tuple(_sandwich_family([t[i].I for i in np.flatnonzero(core)])))

    def to_dict(self) -> dict:
        return {
            "xi_T": np.asarray(self.xi).tolist(),
            "I_T": self.top.to_dict(),
            "tiles": [P.to_dict() for P in self.parts.tiles],
            "params": self.params.to_dict(),
        }


def _sandwich_family(core_cubes) -> list:
    """Cubes ``I`` with ``I_P`` in ``I`` in ``I_P'`` for core cubes ``I_P, I_P'``."""
    core = set(core_cubes)
    if not core:
        return []
    top = max(c.scale for c in core)
    out = set()
    for c in core:
        chain = [c.ancestor(s) for s in range(c.scale, top + 1)]
        hits = [i for i, a in enumerate(chain) if a in core]
        out.update(chain[: hits[-1] + 1])
    return sorted(out)


def make_tree(xi, top: DyadicCube, V, params: TileParams) -> Tree:
    V = as_tileset(V)
    xi = np.asarray(xi, dtype=float)
    xi = xi.reshape(3, -1)
    T = Tree(xi, top, V, params)
    outer, _, _ = T._masks
    tops = V.scales == top.scale
    if not np.any(outer & tops & V.inside(top)):
        raise InvalidTree("no multitile with I_P = I_T and xi_T in 2^{k2+1} Q_P")
    return T


def tree_components(T: Tree) -> TreeParts:
    if not any(P.I == T.top for P in T.parts.tiles):
        raise InvalidTree("tree has no top multitile")
    return T.parts


def theta(T: Tree) -> int:
    return int(bool(np.any(T._masks[2])))


def tree_from_dict(data: dict, V=None) -> Tree:
    params = TileParams(**data["params"]) if "params" in data else TileParams()
    tiles = V if V is not None else [Multitile.from_dict(t) for t in data["tiles"]]
    return make_tree(np.asarray(data["xi_T"], float), DyadicCube.from_dict(data["I_T"]), tiles, params)


# ---------------------------------------------------------------- structural checks


def _blocks_disjoint(c1, h1, c2, h2) -> bool:
    return bool(np.any(np.abs(np.asarray(c1) - np.asarray(c2)) >= h1 + h2))


def lacunary_violations(T: Tree) -> list:
    """Boundary tiles whose projections come within ``2^{-j-k2}`` of ``xi_T``."""
    bad = []
    v = np.asarray(T.v, dtype=float)
    for P in T.parts.boundary:
        j = P.I.scale
        for n in range(3):
            r = math.ldexp(2.0 ** v[n], -j - T.params.k2)
            if not _blocks_disjoint(P.Q.center[n], P.Q.half_widths()[n], T.xi[n], r):
                bad.append((P, n))
    return bad


def _box_inside(small: Box, big: Box) -> bool:
    return bool(np.all(np.abs(small.center - big.center) + small.half_widths()[:, None] <= big.half_widths()[:, None]))


def almorth_hypothesis(G: Gamma, Q: Box, Qp: Box, a: float) -> bool:
    """Some block projections of ``2^a Q`` and ``2^a Q'`` meet and both dilates meet Gamma."""
    A, B = Q.dilate(2.0**a), Qp.dilate(2.0**a)
    hA, hB = A.half_widths(), B.half_widths()
    if all(_blocks_disjoint(A.center[n], hA[n], B.center[n], hB[n]) for n in range(3)):
        return False
    return gamma_box_intersects(G, A) and gamma_box_intersects(G, B)


def almorth_check(G: Gamma, boxes, a: float = 0.0, pairs=None) -> dict:
    """Replay of the projection containment over box pairs.

    Returns the number of pairs examined, how many meet the hypothesis, and the
    pairs for which ``2^{a+4} Q`` fails to contain ``Q'``.
    """
    boxes = list(boxes)
    if pairs is None:
        pairs = itertools.combinations(range(len(boxes)), 2)
    seen = hyp = 0
    bad = []
    for i, k in pairs:
        seen += 1
        Q, Qp = boxes[i], boxes[k]
        if Q.radius < Qp.radius:
            Q, Qp = Qp, Q
        if not almorth_hypothesis(G, Q, Qp, a):
            continue
        hyp += 1
        if not _box_inside(Qp, Q.dilate(2.0 ** (a + 4))):
            bad.append((Q, Qp))
    return {"pairs": seen, "hypothesis": hyp, "violations": bad}


def almorth_violations(G: Gamma, boxes, a: float = 0.0, pairs=None) -> list:
    return almorth_check(G, boxes, a, pairs)["violations"]


# ---------------------------------------------------------------- dictionary


def _batch_inverse(grid: Grid, spectra: np.ndarray) -> np.ndarray:
    """``grid.inverse`` over a leading batch axis."""
    d = grid.d
    axes = tuple(range(-d, 0))
    raw = np.fft.ifftshift(spectra * grid._sign(), axes=axes)
    return np.fft.ifftn(raw, axes=axes) / grid.h**d


def _renormalize(values: np.ndarray, M: np.ndarray) -> float:
    return normalization(np.abs(values), M)


RESOLVE_SIDES = 32  # half-period of the auxiliary torus, in dual cube sides
RESOLVE_POINTS = 8  # auxiliary samples per dual cube side
FAMILIES = ("bump", "translates", "sub_bumps")


def resolving_grid(spec: CutoffSpec) -> Grid:
    """Grid adapted to the dual scale of ``spec``: fine enough to check the decay, wide enough for the tail."""
    side = 2.0 ** (spec.j - spec.v[spec.n])
    return Grid(spec.d, RESOLVE_SIDES * side, int(math.log2(2 * RESOLVE_SIDES * RESOLVE_POINTS)))


class CutoffDictionary:
    """Finite family of verified members of a cut-off class.

    Per class: the canonical bump, its ``3^d - 1`` translates by half the dual
    cube side, and the ``3^d`` bumps on the half-size boxes centred at the
    centre and quarter points of the projection.  Each element is built and
    checked on a grid adapted to its own dual scale (:func:`resolving_grid`),
    rescaled against the class majorant there, and then acts on fields through
    its analytic spectrum sampled on the field lattice.  This keeps classes
    whose dual scale is far below the field grid spacing honest.
    """

    def __init__(self, grid: Grid, families=FAMILIES, verify: bool = True):
        unknown = set(families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown dictionary families {sorted(unknown)}")
        self.grid = grid
        self.families = tuple(f for f in FAMILIES if f in families)
        self.verify = verify
        self._cache = {}

    @property
    def id(self) -> str:
        d = self.grid.d
        tags = {"bump": "B1", "translates": f"T{3**d - 1}", "sub_bumps": f"S{3**d}"}
        parts = [tags[f] for f in self.families] or ["empty"]
        return "+".join(parts) + f"/aux{RESOLVE_SIDES}x{RESOLVE_POINTS}"

    def max_size(self) -> int:
        d = self.grid.d
        sizes = {"bump": 1, "translates": 3**d - 1, "sub_bumps": 3**d}
        return sum(sizes[f] for f in self.families)

    @staticmethod
    def _key(spec: CutoffSpec) -> tuple:
        return (spec.kind, spec.n, spec.xi[spec.n], spec.j, spec.alpha, spec.v, spec.radius)

    def spectra(self, spec: CutoffSpec) -> np.ndarray:
        """Element spectra on the field lattice, stacked on a leading axis (fixed order)."""
        if not self.families:
            raise EmptyDictionary("dictionary has no element families")
        key = self._key(spec)
        if key not in self._cache:
            self._cache[key] = self._build(spec)
        return self._cache[key]

    def elements(self, spec: CutoffSpec) -> list:
        return [SampledField.from_spectrum(self.grid, s) for s in self.spectra(spec)]

    def _build(self, spec: CutoffSpec) -> np.ndarray:
        # modulation does not change |phi|: build at centre 0, evaluate at tau - centre
        xi0 = np.array(spec.xi)
        xi0[spec.n] = 0.0
        spec0 = replace(spec, xi=xi0)
        aux = resolving_grid(spec0)
        d = aux.d
        M = majorant(spec0, aux)
        tau_aux, tau = aux.freqs(), self.grid.freqs() - spec.center
        pairs = []  # (spectrum on aux lattice, spectrum on field lattice)
        base = (_bump_spectrum(spec0, aux), _bump_spectrum(spec0, aux, tau))
        if "bump" in self.families:
            pairs.append(base)
        if "translates" in self.families:
            half = 2.0 ** (spec.j - spec.v[spec.n]) / 2.0
            for off in itertools.product((-1, 0, 1), repeat=d):
                if any(off):
                    y = np.asarray(off, dtype=float) * half
                    pairs.append((base[0] * np.exp(-2j * np.pi * (tau_aux @ y)),
                                  base[1] * np.exp(-2j * np.pi * (tau @ y))))
        if "sub_bumps" in self.families:
            r = spec.radius if spec.radius is not None else 2.0**-spec.j
            for off in itertools.product((-1, 0, 1), repeat=d):
                sub = xi0.copy()
                sub[spec.n] = np.asarray(off) * spec.outer / 2.0
                sspec = CutoffSpec("PHI", spec.n, sub, spec.j + 1, spec.alpha, spec.v, radius=r / 2.0)
                pairs.append((_bump_spectrum(sspec, aux), _bump_spectrum(sspec, aux, tau)))
        out = []
        for s_aux, s_fld in pairs:
            c = normalization(np.abs(aux.inverse(s_aux)), M)
            if self.verify:
                rep = verify_membership(SampledField.from_spectrum(aux, c * s_aux), spec0)
                if not (rep["support_ok"] and rep["decay_ratio"] <= 1.0):
                    raise UnverifiedCutoff(f"dictionary element fails the class check: {rep}")
            out.append(c * s_fld)
        return np.stack(out).astype(complex)


def tile_spec(Q: Box, n: int, alpha: float) -> CutoffSpec:
    r = Q.radius
    return CutoffSpec("PHI", n, Q.center, math.floor(-math.log2(r)), alpha, Q.v, radius=r)


def core_spec(xi, i: int, n: int, params: TileParams, v, d: int) -> CutoffSpec:
    """Class ``Q(xi_T, 2^{k1 + 5d - i})`` used by the core sizes at scale ``i``."""
    e = params.k1 + 5 * d - i
    return CutoffSpec("PHI", n, xi, -e, 4 * params.alpha, v, radius=2.0**e)


# ---------------------------------------------------------------- sizes


@dataclass
class SizeReport:
    bdr: float
    sum: float
    cor: float
    bdr_top: float
    cor_top: float
    dictionary_id: str
    n: int = 0
    p: float = 2.0

    def rows(self, tree_id) -> list:
        return [
            {"tree_id": tree_id, "n": self.n, "kind": k, "value": getattr(self, k), "dictionary_id": self.dictionary_id}
            for k in ("bdr", "sum", "cor", "bdr_top", "cor_top")
        ]


def reports_to_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["tree_id", "n", "kind", "value", "dictionary_id"])
    w.writeheader()
    for tree_id, rep in reports.items():
        for row in rep.rows(tree_id):
            w.writerow(row)
    return buf.getvalue()


def _weighted_quotient(vals: np.ndarray, I, grid: Grid, alpha: float, p: float) -> np.ndarray:
    """``||rho_I^-alpha g||_p / |I|^{1/p}`` for each ``g`` along the leading axis."""
    w = rho(I, grid.points()) ** (-alpha)
    a = np.abs(vals) * w
    axes = tuple(range(1, a.ndim))
    if math.isinf(p):
        return np.max(a, axis=axes)
    vol = I.side**grid.d
    return (np.sum(a**p, axis=axes) * grid.h**grid.d / vol) ** (1.0 / p)


def _indicator(I: DyadicCube, grid: Grid) -> np.ndarray:
    lo = I.lower
    pts = grid.points()
    return np.all((pts >= lo) & (pts < lo + I.side), axis=-1)


class SizeEngine:
    """Evaluates the sizes of trees for fixed fields, with per-tile caching.

    ``fields`` maps block index ``n`` to a :class:`SampledField`; a sequence of
    three fields is accepted too.  Optional spectral filters (Mikhlin cone
    pieces) are passed as ``(key, spectrum)`` pairs.
    """

    def __init__(self, fields, params: TileParams, dictionary: CutoffDictionary):
        if not isinstance(fields, dict):
            fields = dict(enumerate(fields))
        self.fields = fields
        self.params = params
        self.dictionary = dictionary
        self.grid = dictionary.grid
        self._q = {}

    def _conv(self, spec: CutoffSpec, filt=None) -> np.ndarray:
        fhat = self.fields[spec.n].spectrum
        if filt is not None:
            fhat = fhat * filt[1]
        return _batch_inverse(self.grid, self.dictionary.spectra(spec) * fhat)

    # per-tile quotients

    def tile_bdr(self, P: Multitile, n: int, p: float) -> float:
        key = ("bdr", P.key(), n, p)
        if key not in self._q:
            spec = tile_spec(P.Q, n, 4 * self.params.alpha)
            q = _weighted_quotient(self._conv(spec), P.I, self.grid, self.params.alpha, p)
            self._q[key] = float(np.max(q))
        return self._q[key]

    def tile_sum(self, P: Multitile, n: int, filt=None) -> float:
        """``max_phi ||1_{I_P} phi * f||_2^2``."""
        key = ("sum", P.key(), n, None if filt is None else filt[0])
        if key not in self._q:
            spec = tile_spec(P.Q, n, 4 * self.params.alpha)
            vals = self._conv(spec, filt)
            ind = _indicator(P.I, self.grid)
            axes = tuple(range(1, vals.ndim))
            e = np.sum(np.abs(vals) ** 2 * ind, axis=axes) * self.grid.h**self.grid.d
            self._q[key] = float(np.max(e))
        return self._q[key]

    def core_quotient(self, xi, v, I: DyadicCube, i: int, n: int, p: float) -> float:
        xi = np.asarray(xi, dtype=float).reshape(3, -1)
        key = ("cor", tuple(xi[n].tolist()), I.scale, I.corner, i, n, p)
        if key not in self._q:
            spec = core_spec(xi, i, n, self.params, v, self.grid.d)
            q = _weighted_quotient(self._conv(spec), I, self.grid, self.params.alpha, p)
            self._q[key] = float(np.max(q))
        return self._q[key]

    # tree sizes

    def bdr(self, T: Tree, n: int, p: float = 2.0) -> float:
        return max((self.tile_bdr(P, n, p) for P in T.parts.boundary), default=0.0)

    def sum(self, T: Tree, n: int, filt=None) -> float:
        total = math.fsum(self.tile_sum(P, n, filt) for P in T.parts.boundary)
        return math.sqrt(total / T.top.volume)

    def cor(self, T: Tree, n: int, p: float = 2.0) -> float:
        return max((self.core_quotient(T.xi, T.v, I, I.scale, n, p) for I in T.parts.family), default=0.0)

    def bdr_top(self, T: Tree, n: int, p: float = 2.0) -> float:
        return max((self.tile_bdr(P, n, p) for P in T.parts.boundary if P.I == T.top), default=0.0)

    def cor_top(self, T: Tree, n: int, p: float = 2.0) -> float:
        return self.core_quotient(T.xi, T.v, T.top, T.j, n, p)

    def report(self, T: Tree, n: int, p: float = 2.0) -> SizeReport:
        return SizeReport(
            self.bdr(T, n, p), self.sum(T, n), self.cor(T, n, p),
            self.bdr_top(T, n, p), self.cor_top(T, n, p), self.dictionary.id, n, p,
        )


def _engine(f: SampledField, n: int, T: Tree, dictionary: CutoffDictionary | None) -> SizeEngine:
    dictionary = dictionary or CutoffDictionary(f.grid)
    return SizeEngine({n: f}, T.params, dictionary)


def size_bdr(T: Tree, f: SampledField, n: int, p: float = 2.0, dictionary=None) -> float:
    return _engine(f, n, T, dictionary).bdr(T, n, p)


def size_sum(T: Tree, f: SampledField, n: int, dictionary=None) -> float:
    return _engine(f, n, T, dictionary).sum(T, n)


def size_cor(T: Tree, f: SampledField, n: int, p: float = 2.0, dictionary=None) -> float:
    return _engine(f, n, T, dictionary).cor(T, n, p)


def size_tops(T: Tree, f: SampledField, n: int, p: float = 2.0, dictionary=None) -> tuple:
    eng = _engine(f, n, T, dictionary)
    return eng.bdr_top(T, n, p), eng.cor_top(T, n, p)
