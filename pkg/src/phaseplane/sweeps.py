"""Parameter sweeps of the trilinear forms and their CSV tables.

Three families are supported: isotropic dilations of the bilinear Hilbert
direction (``lambda``), rotations of the fields under a conformal d = 2 map
(``theta``), and a list of bilinear Hilbert directions (``M``).  Each row is a
:class:`FormResult`; the table ends with the least-squares slope of
``log(ratio)`` against ``log(lambda)`` or against ``theta`` (``NA`` when it is
not defined, and always for ``M``).
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .geometry import BlockMap
from .modelform import DEFAULT_P, beurling_symbol, bht_direct, direct_multiplier_form
from .wavepackets import Grid, PacketRecipe

PARAMS = ("lambda", "theta", "M")
BHT_BASE = (0.5, 0.5, -1.0)  # (1, 1, -2) scaled to ||L_3|| = 1
PRUNE = 1e-15  # spectral samples below this fraction of the peak carry no signal
COLUMNS = ("lambda", "value_re", "value_im", "norms", "ratio")


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def dilation_rows(f, lambdas, base=BHT_BASE, p=DEFAULT_P) -> list:
    """Bilinear Hilbert form with direction ``lambda * base`` for each ``lambda``."""
    base = np.asarray(base, dtype=float)
    return [bht_direct(lam * base, f, p=p, unit=False) for lam in lambdas]


def direction_rows(f, directions, p=DEFAULT_P) -> list:
    out = []
    for M in directions:
        M = np.asarray(M, dtype=float)
        out.append(bht_direct(M / np.linalg.norm(M), f, p=p))
    return out


def rotation_rows(recipes, grid: Grid, thetas, M, L: BlockMap | None = None, p=DEFAULT_P,
                  prune: float = PRUNE) -> list:
    """Beurling-type form of the rotated fields ``f_n(R_theta^T x)``."""
    m = beurling_symbol(M)
    out = []
    for th in thetas:
        R = rotation(th)
        f = [rec.sample(grid, rotation=R) for rec in recipes]
        out.append(direct_multiplier_form(m, L, f, p=p, prune=prune))
    return out


def slope(values, ratios, log_x: bool = True) -> float | None:
    """Least-squares slope of ``log ratio`` against ``log value`` (or ``value``).

    None when it is not defined: fewer than two distinct abscissae, or a
    non-positive value or ratio where a logarithm is needed.
    """
    x = np.asarray(values, dtype=float)
    r = np.asarray(ratios, dtype=float)
    if x.size < 2 or np.any(r <= 0) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(x)):
        return None
    if log_x:
        if np.any(x <= 0):
            return None
        x = np.log(x)
    if np.ptp(x) == 0:
        return None
    return float(np.polyfit(x, np.log(r), 1)[0])


def _fmt(x: float) -> str:
    return repr(float(x))


def sweep_csv(param: str, values, rows: list) -> str:
    """Rows as CSV with the parameter in the first column and a trailing slope row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = [param] + list(COLUMNS[1:])
    w.writerow(head)
    for v, r in zip(values, rows):
        label = _fmt(v) if np.ndim(v) == 0 else " ".join(_fmt(x) for x in np.ravel(v))
        w.writerow([label, _fmt(np.real(r.value)), _fmt(np.imag(r.value)),
                    " ".join(_fmt(x) for x in r.norms), _fmt(r.ratio)])
    s = None
    if param != "M":
        s = slope(values, [r.ratio for r in rows], log_x=param == "lambda")
    w.writerow(["slope", "", "", "", "NA" if s is None else _fmt(s)])
    return buf.getvalue()


def parse_values(text: str) -> list:
    """``2^0..2^10`` (powers of two), ``a,b,c`` or a single number."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        if lo.startswith("2^") and hi.startswith("2^"):
            return [2.0**k for k in range(int(lo[2:]), int(hi[2:]) + 1)]
        return [float(k) for k in range(int(lo), int(hi) + 1)]
    return [float(eval_simple(t)) for t in text.split(",") if t.strip()]


def eval_simple(token: str) -> float:
    """Numbers, ``2^k`` and ``pi/k`` fractions (no general expression evaluation)."""
    t = token.strip()
    if t.startswith("2^"):
        return 2.0 ** float(t[2:])
    if "pi" in t:
        num, _, den = t.partition("/")
        k = num.replace("pi", "").replace("*", "").strip()
        val = (float(k) if k else 1.0) * math.pi
        return val / float(den) if den else val
    return float(t)


def band_limited_triple(grid: Grid, rng: np.random.Generator, band: float = 0.5, sigma: float = 1.5) -> list:
    """Three smooth packets, one mode each, decaying well inside the torus."""
    out = []
    for _ in range(3):
        x0 = rng.uniform(-1.0, 1.0, size=grid.d)
        mode = rng.uniform(-band, band, size=grid.d)
        amp = complex(rng.normal(), rng.normal())
        out.append(PacketRecipe(tuple(x0.tolist()), sigma, (tuple(mode.tolist()),), (amp,)))
    return out

