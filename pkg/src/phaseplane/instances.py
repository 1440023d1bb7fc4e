"""Randomized desk-scale tile sets and matched fields for the selection suite.

A full Whitney family in ``R^{3d}`` has thousands of members already at two
scales, so instances keep only the members whose nearest point on Gamma lies
in a short stretch of Gamma (a tube).  Fields are sums of Gaussian packets
sitting on randomly chosen tiles, so the sizes are not negligible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BlockMap, Gamma, validate_block_map
from .tiles import TileParams, build_multitiles
from .wavepackets import Grid, PacketRecipe, SampledField, make_field
from .whitney import WhitneyFamily, build_whitney

LINF_TARGET = 1.5  # sup norm of generated fields, inside the ||f||_inf <= 2 normalization


def tube_order(G: Gamma, W: WhitneyFamily, tau0: float) -> list:
    """Member indices sorted by how far their nearest Gamma point lies from ``Gamma(tau0)``."""
    c = G.point(np.full(G.parent.d, tau0))
    dist = [float(np.max(np.abs(G.nearest(Q.center) - c))) for Q in W.members]
    return sorted(range(len(W)), key=lambda i: (dist[i], W.members[i].key()))


def sub_family(W: WhitneyFamily, keep, **info) -> WhitneyFamily:
    keep = sorted(keep)
    return WhitneyFamily([W.members[i] for i in keep], [W.scales[i] for i in keep],
                         dict(W.params, **info), dict(W.audit))


def tube_family(G: Gamma, full: WhitneyFamily, tau0: float, budget: int | None, half_width: float,
                coarse: int = 3) -> WhitneyFamily:
    """Members near ``Gamma(tau0)`` whose multitiles fit in ``budget``.

    The ``coarse`` nearest members of the coarsest scale come first, so that
    trees span more than one scale.
    """
    if budget is None:
        return full
    order = tube_order(G, full, tau0)
    top = min(full.scales, default=0)
    first = [i for i in order if full.scales[i] == top][:coarse]
    order = first + [i for i in order if i not in first]
    per = [len(build_multitiles(sub_family(full, [i]), half_width)) for i in order]
    count = int(np.searchsorted(np.cumsum(per), budget, side="right"))
    return sub_family(full, order[:count], tube={"tau0": tau0, "members": count})


@dataclass
class Instance:
    block_map: BlockMap
    params: TileParams
    grid: Grid
    tiles: list
    fields: list
    meta: dict

    @property
    def gamma(self) -> Gamma:
        return self.block_map.gamma


def matched_field(rng: np.random.Generator, tiles: list, n: int, grid: Grid, packets: int,
                  linf: float = LINF_TARGET) -> SampledField:
    """Sum of packets on random tiles: centred in ``I_P``, modulated to ``(Q_P)_n``."""
    vals = np.zeros((grid.n,) * grid.d, dtype=complex)
    pts = grid.points()
    for i in rng.choice(len(tiles), size=min(packets, len(tiles)), replace=False):
        P = tiles[int(i)]
        x0 = P.I.lower + rng.uniform(0, P.I.side, size=grid.d)
        sigma = P.I.side * rng.uniform(0.25, 0.75)
        mode = P.Q.center[n] + rng.uniform(-0.5, 0.5, size=grid.d) * P.Q.half_widths()[n]
        amp = complex(rng.normal(), rng.normal())
        rec = PacketRecipe(tuple(x0.tolist()), float(sigma), (tuple(mode.tolist()),), (amp,))
        vals += rec(pts)
    peak = float(np.max(np.abs(vals)))
    if peak > 0:
        vals *= linf / peak
    return make_field(vals, grid.R, d=grid.d)


def random_instance(seed: int, gap: int = 1, max_tiles: int = 500, packets: int = 6) -> Instance:
    """A d=1 instance for the bilinear Hilbert map with at most ``max_tiles`` multitiles."""
    rng = np.random.default_rng(seed)
    bm = validate_block_map(1.0, 1.0, -2.0, K=1.0)
    G = bm.gamma
    params = TileParams.from_gap(gap, 1)
    tau0 = float(rng.uniform(-0.5, 0.5))
    half_width = float(rng.choice([16.0, 32.0]))
    full = build_whitney(G, params.k0, (3, 4), 1.5, lattice_density=4, center=G.point([tau0]))
    coarse = int(rng.integers(2, 6))
    budget = int(rng.integers(max_tiles // 2, max_tiles + 1))
    W = tube_family(G, full, tau0, budget, half_width, coarse)
    tiles = build_multitiles(W, half_width)
    grid = Grid(1, 128.0, 10)
    fields = [matched_field(rng, tiles, n, grid, packets) for n in range(3)] if tiles else []
    meta = {"seed": seed, "tau0": tau0, "half_width": half_width, "members": len(W)}
    return Instance(bm, params, grid, tiles, fields, meta)
