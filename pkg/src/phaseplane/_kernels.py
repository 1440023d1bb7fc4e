"""Compiled inner loops for box packing on lattices.

All routines work in scaled coordinates, where every box is an open sup-norm
ball.  Members of one radius ``r_m`` are stored in a dense cell grid of side
``s = r + r_m``; for ``r <= r_m`` two members never share a cell, and a query
ball of radius ``r`` can only meet members in the ``3^D`` neighbouring cells.
"""
from __future__ import annotations

import itertools

import numpy as np
from numba import njit

MAX_CELLS = 60_000_000


@njit(cache=True)
def _flat(cell, strides):
    k = 0
    for i in range(cell.shape[0]):
        k += cell[i] * strides[i]
    return k


@njit(cache=True)
def _query(p, r, grid, origin, s, shape, strides, offsets, centers, radii):
    D = p.shape[0]
    base = np.empty(D, np.int64)
    cell = np.empty(D, np.int64)
    for i in range(D):
        base[i] = np.int64(np.floor((p[i] - origin[i]) / s))
    for o in range(offsets.shape[0]):
        ok = True
        for i in range(D):
            c = base[i] + offsets[o, i]
            if c < 0 or c >= shape[i]:
                ok = False
                break
            cell[i] = c
        if not ok:
            continue
        m = grid[_flat(cell, strides)] - 1
        if m < 0:
            continue
        hit = True
        for i in range(D):
            if abs(centers[m, i] - p[i]) >= r + radii[m]:
                hit = False
                break
        if hit:
            return True
    return False


@njit(cache=True)
def _fill(grid, origin, s, strides, centers):
    D = centers.shape[1]
    cell = np.empty(D, np.int64)
    for m in range(centers.shape[0]):
        for i in range(D):
            cell[i] = np.int64(np.floor((centers[m, i] - origin[i]) / s))
        grid[_flat(cell, strides)] = m + 1


@njit(cache=True)
def _blocked(points, r, grid, origin, s, shape, strides, offsets, centers, radii, out):
    for k in range(points.shape[0]):
        if not out[k]:
            out[k] = _query(points[k], r, grid, origin, s, shape, strides, offsets, centers, radii)


@njit(cache=True)
def _greedy(points, r, skip, grid, origin, s, shape, strides, offsets, centers, radii):
    D = points.shape[1]
    n_mem = 0
    chosen = np.zeros(points.shape[0], np.bool_)
    cell = np.empty(D, np.int64)
    for k in range(points.shape[0]):
        if skip[k]:
            continue
        if n_mem and _query(points[k], r, grid, origin, s, shape, strides, offsets, centers, radii):
            continue
        for i in range(D):
            centers[n_mem, i] = points[k, i]
            cell[i] = np.int64(np.floor((points[k, i] - origin[i]) / s))
        radii[n_mem] = r
        n_mem += 1
        grid[_flat(cell, strides)] = n_mem
        chosen[k] = True
    return chosen


def _offsets(D: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=D)), dtype=np.int64)


def _layout(lo: np.ndarray, hi: np.ndarray, s: float):
    origin = lo - s
    shape = (np.floor((hi - origin) / s).astype(np.int64) + 2)
    if float(np.prod(shape.astype(float))) > MAX_CELLS:
        raise MemoryError("cell grid too large; reduce N or the scale range")
    strides = np.ones_like(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return origin, shape, strides


def blocked_mask(points: np.ndarray, r: float, centers: np.ndarray, r_m: float, out=None) -> np.ndarray:
    """Mark query balls ``(points, r)`` meeting some member ball of radius ``r_m >= r``."""
    out = np.zeros(points.shape[0], dtype=bool) if out is None else out
    if not centers.shape[0] or not points.shape[0]:
        return out
    assert r <= r_m
    s = r + r_m
    lo = np.minimum(points.min(axis=0), centers.min(axis=0))
    hi = np.maximum(points.max(axis=0), centers.max(axis=0))
    origin, shape, strides = _layout(lo, hi, s)
    grid = np.zeros(int(np.prod(shape)), dtype=np.int64)
    centers = np.ascontiguousarray(centers, dtype=float)
    _fill(grid, origin, s, strides, centers)
    radii = np.full(centers.shape[0], r_m)
    _blocked(np.ascontiguousarray(points, dtype=float), r, grid, origin, s, shape, strides,
             _offsets(points.shape[1]), centers, radii, out)
    return out


def greedy_equal(points: np.ndarray, r: float, skip: np.ndarray) -> np.ndarray:
    """First-fit over equal balls in the given order, ignoring ``skip``; returns chosen mask."""
    if not points.shape[0]:
        return np.zeros(0, dtype=bool)
    s = 2 * r
    origin, shape, strides = _layout(points.min(axis=0), points.max(axis=0), s)
    grid = np.zeros(int(np.prod(shape)), dtype=np.int64)
    centers = np.empty_like(points, dtype=float)
    radii = np.empty(points.shape[0])
    return _greedy(np.ascontiguousarray(points, dtype=float), r, skip, grid, origin, s, shape,
                   strides, _offsets(points.shape[1]), centers, radii)
