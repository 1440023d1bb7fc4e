"""Greedy tree selection and the level decomposition of a multitile collection.

At level ``M`` the selection removes trees in three phases (core tops, boundary
tops, then cone-ordered sums), after which every tree on the remaining
collection has all sizes below ``2^{(M - 10d)/2} ||f_n||_2``.  Trees are
enumerated from the tiles themselves: one candidate ``(xi(P), I_P)`` per tile,
with ``xi(P)`` the point of Gamma nearest to the centre of ``Q_P``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import HypothesisViolated, InvalidTree, NonTermination, NotConvex
from .geometry import Gamma
from .tiles import SizeEngine, TileParams, TileSet, Tree, as_tileset, make_tree, theta
from .wavepackets import cone_directions, make_mikhlin_cone_partition

log = logging.getLogger(__name__)

LEVEL_CAP = 200
FLOOR = 1e-12  # thresholds below this fraction of the first one only see round-off
PHASES = ("core", "bdr", "sum", "sweep", "residual")


class Candidates:
    """Candidate trees on a tile collection, with cached Gamma projections."""

    def __init__(self, G: Gamma, params: TileParams):
        self.G = G
        self.params = params
        self._xi = {}

    def xi(self, P) -> np.ndarray:
        key = P.Q.key()
        if key not in self._xi:
            self._xi[key] = self.G.nearest(P.Q.center)
        return self._xi[key]

    def trees(self, V: TileSet) -> list:
        out = {}
        for P in V:
            xi = self.xi(P)
            T = Tree(xi, P.I, V, self.params)
            k = T.key()
            if k in out:
                continue
            try:
                out[k] = make_tree(xi, P.I, V, self.params)
            except InvalidTree:
                continue
        return [out[k] for k in sorted(out)]


def convexity_defects(V, G: Gamma, params: TileParams, cands: Candidates | None = None) -> list:
    """Candidate trees breaking scale fullness or top-scale core promotion."""
    V = as_tileset(V)
    cands = cands or Candidates(G, params)
    bad = []
    for T in cands.trees(V):
        outer, _, core = T._masks
        scales = set(V.scales[outer].tolist())
        if set(range(min(scales), T.j + 1)) - scales:
            bad.append((T, "scale gap"))
            continue
        if np.any(core) and not np.any(core & (V.scales == T.j)):
            bad.append((T, "no top-scale core tile"))
    return bad


def is_convex(V, G: Gamma, params: TileParams, cands: Candidates | None = None) -> bool:
    return not convexity_defects(V, G, params, cands)


# ---------------------------------------------------------------- records


@dataclass
class ChosenTree:
    tree: Tree
    phase: str
    n: int | None
    delta: int | None
    size: float
    tiles: tuple

    def to_dict(self) -> dict:
        return {
            "xi_T": np.asarray(self.tree.xi).tolist(),
            "I_T": self.tree.top.to_dict(),
            "phase": self.phase,
            "n": self.n,
            "delta": self.delta,
            "size": self.size,
            "tiles": [P.to_dict() for P in self.tiles],
        }


@dataclass
class LevelDecomposition:
    levels: dict = field(default_factory=dict)
    residual: list = field(default_factory=list)
    packing: dict = field(default_factory=dict)
    audit: list = field(default_factory=list)
    start_level: int | None = None
    norms: list = field(default_factory=list)

    def trees(self):
        for M in sorted(self.levels, reverse=True):
            yield from self.levels[M]
        yield from self.residual

    def to_dict(self) -> dict:
        return {
            "start_level": self.start_level,
            "norms": self.norms,
            "levels": [
                {"M": M, "packing": self.packing.get(M, 0.0), "trees": [c.to_dict() for c in self.levels[M]]}
                for M in sorted(self.levels, reverse=True)
            ],
            "residual": [c.to_dict() for c in self.residual],
            "max_packing": max(self.packing.values(), default=0.0),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_audit(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------- level selection


class Selector:
    """Runs the per-level selection for fixed fields; owns the remaining set."""

    def __init__(self, V, engine: SizeEngine, G: Gamma, params: TileParams, check_convex: bool = True):
        self.V = as_tileset(V)
        self.engine = engine
        self.G = G
        self.params = params
        self.cands = Candidates(G, params)
        self.grid = engine.grid
        self.d = self.grid.d
        self.norms = [engine.fields[n].l2_norm() for n in range(3)]
        self.check_convex = check_convex
        self.audit = []
        self._filters = {}

    # sizes

    def _filter(self, xi, n: int, delta: int):
        key = (tuple(np.asarray(xi[n]).tolist()), n)
        if key not in self._filters:
            pieces = make_mikhlin_cone_partition(np.asarray(xi[n]), n, self.grid, v_n=self.params_v[n])
            self._filters[key] = [p.spectrum for p in pieces]
        return ((key, delta), self._filters[key][delta])

    @property
    def params_v(self):
        return self.V.tiles[0].Q.v if len(self.V) else (0, 0, 0)

    def sum_size(self, T: Tree, n: int, delta: int) -> float:
        return self.engine.sum(T, n, self._filter(T.xi, n, delta))

    def worst(self, T: Tree) -> float:
        """Largest normalized size entering the level hypothesis."""
        e = self.engine
        th = theta(T)
        out = 0.0
        for n in range(3):
            if self.norms[n] == 0:
                continue
            vals = [e.bdr(T, n, 2.0)]
            if th:
                vals.append(e.cor(T, n, 2.0))
            vals.extend(self.sum_size(T, n, delta) for delta in range(2 * self.d))
            out = max(out, max(vals) / self.norms[n])
        return out

    def max_ratio(self) -> float:
        return max((self.worst(T) for T in self.cands.trees(self.V)), default=0.0)

    # bookkeeping

    def _take(self, T: Tree, phase, n, delta, size, M, out: list):
        tiles = T.parts.tiles
        out.append(ChosenTree(T, phase, n, delta, size, tiles))
        self.audit.append({
            "step": len(self.audit),
            "level": M,
            "phase": phase,
            "n": n,
            "delta": delta,
            "xi_T": np.asarray(T.xi).tolist(),
            "I_T": T.top.to_dict(),
            "size": size,
            "removed": len(tiles),
            "remaining_before": len(self.V),
        })
        self.V = self.V.without(tiles)

    def _rebind(self, T: Tree) -> Tree | None:
        try:
            return make_tree(T.xi, T.top, self.V, self.params)
        except InvalidTree:
            return None

    # phases

    def _top_phase(self, kind: str, n: int, thr: float, M: int, out: list):
        e = self.engine
        full = e.cor if kind == "core" else e.bdr
        top = e.cor_top if kind == "core" else e.bdr_top
        while True:
            picks = {}
            for T in self.cands.trees(self.V):
                if kind == "core" and not theta(T):
                    continue
                if full(T, n, 2.0) < thr:
                    continue
                S = T if top(T, n, 2.0) >= full(T, n, 2.0) else self._subtree(T, n, kind)
                if S is None or top(S, n, 2.0) < thr or (kind == "core" and not theta(S)):
                    continue
                picks[S.key()] = S
            if not picks:
                return
            best = min(picks.values(), key=lambda S: (-S.top.scale, S.key()))
            self._take(best, kind, n, None, top(best, n, 2.0), M, out)

    def _subtree(self, T: Tree, n: int, kind: str) -> Tree | None:
        """Admissible subtree whose top attains the size of ``T``."""
        e = self.engine
        if kind == "core":
            cubes = T.parts.family
            vals = [e.core_quotient(T.xi, T.v, I, I.scale, n, 2.0) for I in cubes]
        else:
            cubes = [P.I for P in T.parts.boundary]
            vals = [e.tile_bdr(P, n, 2.0) for P in T.parts.boundary]
        if not cubes:
            return None
        I = cubes[int(np.argmax(vals))]
        try:
            return make_tree(T.xi, I, self.V, self.params)
        except InvalidTree:
            return None

    def _sum_phase(self, n: int, delta: int, thr: float, M: int, out: list):
        e_dir = cone_directions(self.d)[delta]
        order = sorted(self.cands.trees(self.V), key=lambda T: (-float(np.asarray(T.xi[n]) @ e_dir), T.key()))
        for T in order:
            T = self._rebind(T)
            if T is None:
                continue
            s = self.sum_size(T, n, delta)
            if s >= thr:
                self._take(T, "sum", n, delta, s, M, out)

    def _violators(self, thr_rel: float) -> list:
        return [T for T in self.cands.trees(self.V) if self.worst(T) > thr_rel]

    def select_level(self, M: int, check_hypothesis: bool = True) -> list:
        d = self.d
        if check_hypothesis:
            r = self.max_ratio()
            if r > 2.0 ** (M / 2):
                raise HypothesisViolated(f"a tree has normalized size {r:.6g} > 2^(M/2) at M={M}")
        rel = 2.0 ** ((M - 10 * d) / 2)
        out = []
        for kind in ("core", "bdr"):
            for n in range(3):
                if self.norms[n] > 0:
                    self._top_phase(kind, n, rel * self.norms[n], M, out)
        for n in range(3):
            if self.norms[n] == 0:
                continue
            for delta in range(2 * d):
                self._sum_phase(n, delta, rel * self.norms[n], M, out)
        # trees the candidate phases could not reach
        while True:
            bad = self._violators(rel)
            if not bad:
                break
            T = min(bad, key=lambda T: (-T.top.scale, T.key()))
            self._take(T, "sweep", None, None, self.worst(T), M, out)
        if self.check_convex and not is_convex(self.V, self.G, self.params, self.cands):
            raise NotConvex(f"remaining collection is not convex after level {M}")
        return out

    def residual(self) -> list:
        out = []
        while len(self.V):
            P = self.V.tiles[0]
            T = make_tree(self.cands.xi(P), P.I, self.V, self.params)
            self._take(T, "residual", None, None, 0.0, None, out)
        return out


def select_level(V, engine: SizeEngine, G: Gamma, params: TileParams, M: int):
    """One level of the selection; returns ``(chosen, remaining)``."""
    sel = Selector(V, engine, G, params)
    if not is_convex(sel.V, G, params, sel.cands):
        raise NotConvex("input collection is not convex")
    chosen = sel.select_level(M)
    return chosen, sel.V


def decompose(V, engine: SizeEngine, G: Gamma, params: TileParams, check_convex: bool = True,
              level_cap: int = LEVEL_CAP) -> LevelDecomposition:
    sel = Selector(V, engine, G, params, check_convex=check_convex)
    out = LevelDecomposition(norms=sel.norms)
    if check_convex and not is_convex(sel.V, G, params, sel.cands):
        raise NotConvex("input collection is not convex")
    if not len(sel.V):
        return out
    r0 = sel.max_ratio()
    if r0 > 0:
        M = math.ceil(2 * math.log2(r0))
        out.start_level = M
        stop = 2.0 * math.log2(r0 * FLOOR)
        for _ in range(level_cap):
            if not len(sel.V) or M < stop:
                break
            chosen = sel.select_level(M, check_hypothesis=False)
            if chosen:
                out.levels[M] = chosen
                out.packing[M] = math.fsum(2.0**M * c.tree.top.volume for c in chosen)
            M -= 10 * sel.d
        else:
            if len(sel.V) and M >= stop:
                raise NonTermination(f"{len(sel.V)} tiles left after {level_cap} levels")
    out.residual = sel.residual()
    out.audit = sel.audit
    return out


def packing_check(D: LevelDecomposition) -> tuple:
    """Per-level packing sums and their maximum."""
    per = {M: math.fsum(2.0**M * c.tree.top.volume for c in D.levels[M]) for M in D.levels}
    return per, max(per.values(), default=0.0)


def cover_defects(V, D: LevelDecomposition) -> dict:
    """Tiles missing from the decomposition and tiles removed more than once."""
    seen = {}
    for c in D.trees():
        for P in c.tiles:
            seen[P.key()] = seen.get(P.key(), 0) + 1
    keys = {P.key() for P in as_tileset(V)}
    return {
        "missing": sorted(keys - set(seen)),
        "repeated": sorted(k for k, v in seen.items() if v > 1),
        "foreign": sorted(set(seen) - keys),
    }


def verify_decomposition(V, D: LevelDecomposition, engine: SizeEngine, G: Gamma, params: TileParams,
                         rtol: float = 1e-12) -> dict:
    """Exhaustive replay of a decomposition.

    Rebuilds the remaining collection level by level from the recorded trees and
    checks: each tree lives on the collection it was taken from, every tree at
    level ``M`` obeys the ``2^{M/2}`` bound, every candidate tree surviving level
    ``M`` obeys the ``2^{(M - 10d)/2}`` bound, and the removals cover ``V``
    exactly once.
    """
    d = engine.grid.d
    judge = Selector(V, engine, G, params, check_convex=False)
    failures = []
    for M in sorted(D.levels, reverse=True):
        for c in D.levels[M]:
            try:
                T = make_tree(c.tree.xi, c.tree.top, judge.V, params)
            except InvalidTree:
                failures.append(("not a tree on the remaining set", M, c.tree.key()))
                continue
            if {P.key() for P in T.parts.tiles} != {P.key() for P in c.tiles}:
                failures.append(("tile set differs on replay", M, c.tree.key()))
            if judge.worst(T) > 2.0 ** (M / 2) * (1 + rtol):
                failures.append(("level bound", M, c.tree.key()))
            judge.V = judge.V.without(c.tiles)
        floor = 2.0 ** ((M - 10 * d) / 2) * (1 + rtol)
        for T in judge.cands.trees(judge.V):
            if judge.worst(T) > floor:
                failures.append(("survivor above threshold", M, T.key()))
    cover = cover_defects(V, D)
    return {"failures": failures, **{k: len(v) for k, v in cover.items()}, "ok": not failures and not any(cover.values())}
