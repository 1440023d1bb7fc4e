"""Trilinear forms: tensor model, frequency localized, symbol expansion, direct oracles.

Conventions.  For fields on a common grid,

    Lambda_m(f_1, f_2, f_3) = int delta(xi_1 + xi_2 + xi_3) prod fhat_n(xi_n) m(xi) dxi

is realized on the reciprocal lattice with the exact constraint
``xi_3 = -xi_1 - xi_2`` (cyclic wrap), weighted by ``(2R)^(-2d)``.  With ``m = 1``
this equals the grid sum of ``f_1 f_2 f_3``.

The bilinear Hilbert form ``pv int int prod f_n(x + M_n t) dx dt / t`` has
multiplier ``i pi sgn(M . xi)``; the bilinear Beurling form
``pv int int prod f_n(z + M_n zeta) dA dA / zeta^2`` has multiplier
``-pi (conj(w) / |w|)^2`` with ``w = sum_n conj(M_n) xi_n`` in complex notation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.spatial import cKDTree

from .errors import (
    BadShape,
    GridMismatch,
    NotUnitVector,
    SupportLeak,
    TailTooLarge,
    TruncationTooCoarse,
    UnverifiedCutoff,
)
from .geometry import Box, Gamma
from .wavepackets import CutoffSpec, Grid, SampledField, majorant, smooth_step, verify_membership

DEFAULT_P = (3.0, 3.0, 3.0)


@dataclass
class FormResult:
    value: complex
    norms: tuple
    ratio: float
    provenance: str
    p: tuple = DEFAULT_P
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "value_re": float(np.real(self.value)),
            "value_im": float(np.imag(self.value)),
            "norms": [float(x) for x in self.norms],
            "ratio": float(self.ratio),
            "provenance": self.provenance,
            "p": list(self.p),
            "extra": self.extra,
        }


def _result(value, f, provenance, p=DEFAULT_P, **extra) -> FormResult:
    norms = tuple(fn.lp_norm(pn) for fn, pn in zip(f, p))
    prod = float(np.prod(norms))
    ratio = abs(value) / prod if prod > 0 else 0.0
    return FormResult(complex(value), norms, ratio, provenance, tuple(p), extra)


def _common_grid(f) -> Grid:
    if len(f) != 3:
        raise BadShape("three fields are required")
    g = f[0].grid
    for other in f[1:]:
        if other.grid != g:
            raise GridMismatch(f"{other.grid} != {g}")
    return g


# ---------------------------------------------------------------- tensor forms


def _member_cutoff(cutoffs, i: int, n: int) -> SampledField:
    try:
        return cutoffs[(i, n)]
    except KeyError:
        raise UnverifiedCutoff(f"no cut-off for member {i}, block {n}") from None


def _tensor_sum(members, cutoffs, f, strict: bool, grid: Grid) -> complex:
    total = 0.0 + 0.0j
    hd = grid.h**grid.d
    for i in members:
        prod = None
        for n in range(3):
            phi = _member_cutoff(cutoffs, i, n)
            if phi.grid != grid:
                raise GridMismatch(f"cut-off ({i}, {n}) lives on {phi.grid}")
            if strict:
                spec = phi.meta.get("spec")
                if spec is None:
                    raise UnverifiedCutoff(f"cut-off ({i}, {n}) carries no class spec")
                rep = verify_membership(phi, CutoffSpec.from_dict(spec))
                if rep["decay_ratio"] > 1.0 or not rep["support_ok"]:
                    raise UnverifiedCutoff(f"cut-off ({i}, {n}) fails its class: {rep}")
            conv = phi.convolve(f[n]).values
            prod = conv if prod is None else prod * conv
        total += np.sum(prod) * hd
    return total


def tensor_form(W, cutoffs: dict, f, strict: bool = False, p=DEFAULT_P) -> FormResult:
    """``sum_Q int prod_n (phi_{Q,n} * f_n)(x) dx`` in family order, row-major grid sums."""
    grid = _common_grid(f)
    value = _tensor_sum(range(len(W.members)), cutoffs, f, strict, grid)
    return _result(value, f, "tensor", p, members=len(W.members))


def localized_members(W, eta, k: int) -> list:
    """Indices of members ``Q`` with ``eta`` in ``2^k Q``."""
    eta = np.asarray(eta, dtype=float)
    return [i for i, Q in enumerate(W.members) if Q.dilate(2.0**k).contains(eta)]


def freq_localized_form(W, eta, k: int, cutoffs: dict, f, G: Gamma | None = None,
                        strict: bool = False, p=DEFAULT_P) -> FormResult:
    """Tensor form restricted to members with ``eta`` in ``2^k Q``."""
    eta = np.asarray(eta, dtype=float)
    if G is not None:
        dist = float(G.box_distance(eta.reshape(3, G.d)))
        if dist > 1e-12 * max(1.0, float(np.max(np.abs(eta)))):
            raise ValueError("eta must lie on Gamma")
    grid = _common_grid(f)
    idx = localized_members(W, eta, k)
    value = _tensor_sum(idx, cutoffs, f, strict, grid)
    return _result(value, f, "tensor-localized", p, members=idx)


def whitney_cutoffs(W, grid: Grid, alpha: float) -> dict:
    """Canonical ``Phi_n^alpha(Q)`` cut-offs for every member and block."""
    from .wavepackets import make_cutoff

    out = {}
    for i, Q in enumerate(W.members):
        for n in range(3):
            spec = CutoffSpec("PHI", n, Q.center, math.floor(-math.log2(Q.radius)), alpha, Q.v, radius=Q.radius)
            out[(i, n)] = make_cutoff(spec, grid)
    return out


# ---------------------------------------------------------------- direct forms


def _lattice_k(grid: Grid) -> np.ndarray:
    return np.arange(-(grid.n // 2), grid.n // 2)


def direct_multiplier_form(m, L, f, p=DEFAULT_P, chunk: int = 1 << 22, prune: float = 0.0) -> FormResult:
    """Lattice sum of ``fhat_1(xi_1) fhat_2(xi_2) fhat_3(-xi_1-xi_2) m(L^-1 xi)``.

    ``m`` is a vectorized callable on arrays of shape ``(..., 3, d)``; ``L`` a
    :class:`BlockMap` or ``None`` for the identity.  With ``prune > 0`` the
    spectral samples of ``f_1, f_2`` below ``prune`` times their peak are skipped.
    """
    grid = _common_grid(f)
    d, n = grid.d, grid.n
    step = grid.step
    F1 = f[0].spectrum.reshape(-1)
    F2 = f[1].spectrum.reshape(-1)
    F3 = f[2].spectrum
    kk = np.stack(np.meshgrid(*[_lattice_k(grid)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    nz1 = np.flatnonzero(np.abs(F1) > prune * np.max(np.abs(F1), initial=0.0))
    nz2 = np.flatnonzero(np.abs(F2) > prune * np.max(np.abs(F2), initial=0.0))
    total = 0.0 + 0.0j
    rows = max(1, chunk // max(1, nz2.size))
    for start in range(0, nz1.size, rows):
        i1 = nz1[start : start + rows]
        k1 = kk[i1][:, None, :]
        k2 = kk[nz2][None, :, :]
        k3 = -(k1 + k2)
        idx3 = tuple(((k3[..., a] + n // 2) % n) for a in range(d))
        f3 = F3[idx3]
        k3w = ((k3 + n // 2) % n) - n // 2
        xi = np.stack(np.broadcast_arrays(k1, k2, k3w), axis=-2) * step
        if L is not None:
            xi = L.apply_inverse(xi)
        mv = m(xi)
        total += np.sum(F1[i1][:, None] * F2[nz2][None, :] * f3 * mv)
    return _result(total * step ** (2 * d), f, "direct", p, pruned=prune)


def bht_symbol(M):
    """``i pi sgn(M . xi)`` for d = 1, vectorized over ``(..., 3, 1)``."""
    M = np.asarray(M, dtype=float).reshape(3)

    def m(xi):
        return 1j * np.pi * np.sign(xi[..., 0] @ M)

    return m


def _as_complex(xi):
    return xi[..., 0] + 1j * xi[..., 1]


def beurling_symbol(M):
    """``-pi (conj(w) / |w|)^2``, ``w = sum_n conj(M_n) xi_n``, zero at ``w = 0``."""
    M = np.asarray(M, dtype=complex).reshape(3)

    def m(xi):
        w = np.sum(np.conj(M) * _as_complex(xi), axis=-1)
        a = np.abs(w)
        safe = np.where(a > 0, a, 1.0)
        return np.where(a > 0, -np.pi * (np.conj(w) / safe) ** 2, 0.0)

    return m


def _check_unit(M, tol=1e-12):
    M = np.asarray(M)
    norm = float(np.sqrt(np.sum(np.abs(M) ** 2)))
    if abs(norm - 1.0) > tol:
        raise NotUnitVector(f"|M| = {norm}")


def effective_band(field_: SampledField, rtol: float = 1e-13) -> float:
    """Largest lattice frequency (sup-norm) where ``|fhat|`` exceeds ``rtol`` of its max."""
    a = np.abs(field_.spectrum)
    if not a.any():
        return 0.0
    mask = a > rtol * a.max()
    freqs = np.max(np.abs(field_.grid.freqs()), axis=-1)
    return float(freqs[mask].max())


def effective_radius(field_: SampledField, rtol: float = 1e-13) -> float:
    """Largest ``|x|_inf`` on the grid where ``|f|`` exceeds ``rtol`` of its max."""
    a = np.abs(field_.values)
    if not a.any():
        return 0.0
    mask = a > rtol * a.max()
    pts = np.max(np.abs(field_.grid.points()), axis=-1)
    return float(pts[mask].max())


def wrap_limit(f, shifts) -> float:
    """Largest ``|t|`` for which ``x + s_n t`` shifts keep the supports from wrapping."""
    grid = _common_grid(f)
    W = max(effective_radius(fn) for fn in f)
    spread = max(abs(a - b) for a, b in itertools.combinations(shifts, 2))
    if spread == 0:
        return math.inf
    return max(0.0, (2 * grid.R - 2 * W) / spread)


def _shift_products(f, disp) -> np.ndarray:
    """``h^d sum_x prod_n f_n(x + disp_n[b])`` for a batch of real displacements.

    ``disp[n]`` has shape ``(B, d)``.  Shifts are applied spectrally (exact for
    the periodic fields); the phase factorizes over axes.
    """
    grid = f[0].grid
    d = grid.d
    axes = tuple(range(1, d + 1))
    fa = np.fft.ifftshift(grid.freq_axis())
    base = [np.fft.ifftshift(fn.spectrum * grid._sign()) for fn in f]
    B = disp[0].shape[0]
    out = np.empty(B, dtype=complex)
    batch = max(1, (1 << 21) // grid.n**d)
    for s in range(0, B, batch):
        prod = None
        for S, D in zip(base, disp):
            Db = D[s : s + batch]
            spec = np.broadcast_to(S, (Db.shape[0],) + S.shape)
            for ax in range(d):
                e = np.exp(2j * np.pi * np.multiply.outer(Db[:, ax], fa))
                shape = [Db.shape[0]] + [1] * d
                shape[ax + 1] = grid.n
                spec = spec * e.reshape(shape)
            vals = sfft.ifftn(spec, axes=axes, workers=-1)
            prod = vals if prod is None else prod * vals
        out[s : s + prod.shape[0]] = prod.sum(axis=axes) * grid.h**d / grid.h ** (3 * d)
    return out


def _dyadic_panels(t_min: float, T: float, max_len: float):
    """Panels ``[0, t_min]`` then dyadic shells up to ``T``, each split to length ``<= max_len``."""
    edges = [0.0, t_min]
    while edges[-1] < T:
        edges.append(min(2 * edges[-1], T))
    panels = []
    for a, b in zip(edges[:-1], edges[1:]):
        pieces = max(1, math.ceil((b - a) / max_len))
        for k in range(pieces):
            panels.append((a + (b - a) * k / pieces, a + (b - a) * (k + 1) / pieces))
    return panels


def _gauss_nodes(panels, order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in panels:
        nodes.append((b - a) / 2 * x + (a + b) / 2)
        weights.append((b - a) / 2 * w)
    return np.concatenate(nodes), np.concatenate(weights)


def bht_direct(M, f, T: float | None = None, order: int = 16, p=DEFAULT_P, unit: bool = True) -> FormResult:
    """``pv int int f_1(x+M_1 t) f_2(x+M_2 t) f_3(x+M_3 t) dx dt/t`` (d = 1).

    The x-integral is a grid sum with spectral (exact) shifts; the t-integral
    pairs ``t`` with ``-t`` so the integrand ``(I(t) - I(-t)) / t`` is regular,
    and uses Gauss-Legendre panels on dyadic shells of ``(0, T]``.  ``T``
    defaults to the wrap-around limit of the torus.
    """
    grid = _common_grid(f)
    if grid.d != 1:
        raise BadShape("bht_direct needs d = 1")
    M = np.asarray(M, dtype=float).reshape(3)
    if unit:
        _check_unit(M)
    T = wrap_limit(f, M) if T is None else float(T)
    if not math.isfinite(T) or T <= 0:
        T = grid.R
    omega = sum(abs(Mn) for Mn in M) * max(effective_band(fn) for fn in f) + grid.step
    panels = _dyadic_panels(min(grid.h, T), T, 1.5 / omega)
    t, w = _gauss_nodes(panels, order)
    ts = np.concatenate([t, -t])
    I = _shift_products(f, [np.outer(ts, [Mn]) for Mn in M])
    J = (I[: t.size] - I[t.size :]) / t
    value = np.sum(w * J)
    return _result(value, f, "bht-direct", p, T=T, nodes=int(t.size))


def _padded_multiplier(field_: SampledField, mult, pad: int) -> np.ndarray:
    """Apply a Fourier multiplier after zero-padding by ``pad`` per axis; values on the original grid.

    Padding keeps the same spacing, so periodization effects of slowly decaying
    outputs (like ``H f`` for ``f`` with nonzero mean) shrink by ``pad^2``.
    """
    g = field_.grid
    if pad & (pad - 1) or pad < 1:
        raise ValueError("pad must be a power of two")
    big = Grid(g.d, g.R * pad, g.m + pad.bit_length() - 1)
    off = g.n * (pad - 1) // 2
    sl = tuple(slice(off, off + g.n) for _ in range(g.d))
    vals = np.zeros((big.n,) * g.d, dtype=complex)
    vals[sl] = field_.values
    spec = big.forward(vals) * mult(big.freqs())
    return big.inverse(spec)[sl]


def hilbert_multiplier(freqs):
    return 1j * np.pi * np.sign(freqs[..., 0])


def bht_degenerate_oracle(M, f, pad: int = 16) -> complex:
    """``sgn(M_2 - M_1) int f_1 f_3 (-pi H f_2)`` with ``H`` the spectral Hilbert transform."""
    grid = _common_grid(f)
    M = np.asarray(M, dtype=float).reshape(3)
    hil = _padded_multiplier(f[1], hilbert_multiplier, pad)
    return complex(np.sign(M[1] - M[0]) * np.sum(f[0].values * f[2].values * hil) * grid.h)


def beurling_direct(M, f, T: float | None = None, radial_order: int = 8, angles: int | None = None,
                    p=DEFAULT_P, unit: bool = True) -> FormResult:
    """``pv int int prod_n f_n(z + M_n zeta) dA(z) dA(zeta) / zeta^2`` (d = 2).

    Polar coordinates ``zeta = r e^{i phi}``: ``dA / zeta^2 = e^{-2 i phi} dr dphi / r``.
    The angular integral is a trapezoid rule (exact for trigonometric
    polynomials, and it annihilates the constant term, which is the
    cancellation of the kernel on circles); the radial one uses Gauss-Legendre
    panels on dyadic shells.
    """
    grid = _common_grid(f)
    if grid.d != 2:
        raise BadShape("beurling_direct needs d = 2")
    M = np.asarray(M, dtype=complex).reshape(3)
    if unit:
        _check_unit(M)
    T = wrap_limit(f, list(M)) if T is None else float(T)
    if not math.isfinite(T) or T <= 0:
        T = grid.R
    band = max(effective_band(fn) for fn in f) * math.sqrt(2)
    omega = float(np.sum(np.abs(M))) * band + grid.step
    panels = _dyadic_panels(min(grid.h, T), T, 1.5 / omega)
    r, w = _gauss_nodes(panels, radial_order)
    total = 0.0 + 0.0j
    counts = []
    for rr, ww in zip(r, w):
        # trapezoid resolves angular frequencies up to 2 pi omega r
        na = angles or int(2 ** math.ceil(math.log2(max(16, 2 * math.pi * omega * rr + 16))))
        counts.append(na)
        phi = 2 * np.pi * np.arange(na) / na
        zeta = rr * np.exp(1j * phi)
        disp = [np.stack([(Mn * zeta).real, (Mn * zeta).imag], axis=-1) for Mn in M]
        I = _shift_products(f, disp)
        total += ww / rr * np.sum(I * np.exp(-2j * phi)) * (2 * np.pi / na)
    angles = max(counts)
    return _result(total, f, "beurling-direct", p, T=T, radial_nodes=int(r.size), angles=angles)


def beurling_multiplier(freqs):
    xi = _as_complex(freqs)
    a = np.abs(xi)
    return np.where(a > 0, -np.pi * (np.conj(xi) / np.where(a > 0, a, 1.0)) ** 2, 0.0)


def beurling_degenerate_oracle(M, f, pad: int = 4) -> complex:
    """``((M_2 - M_1)/|M_2 - M_1|)^2 int f_1 f_3 (K f_2)`` with ``K`` the spectral multiplier."""
    grid = _common_grid(f)
    M = np.asarray(M, dtype=complex).reshape(3)
    c = M[1] - M[0]
    Kf = _padded_multiplier(f[1], beurling_multiplier, pad)
    return complex((c / abs(c)) ** 2 * np.sum(f[0].values * f[2].values * Kf) * grid.h**2)


# ---------------------------------------------------------------- symbol expansion


def exp_bump(s, a: float = 12.0) -> np.ndarray:
    """``exp(a - a / (1 - s^2))`` for ``|s| < 1``, else 0."""
    s = np.asarray(s, dtype=float)
    q = 1.0 - s * s
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(q > 0, np.exp(a - a / np.where(q > 0, q, 1.0)), 0.0)


@dataclass
class SymbolExpansion:
    cover: object
    block_map: object
    k_max: int
    samples: int
    coefficients: list  # per member: complex array (2k_max+1,)^(3d), centred indices
    centers: np.ndarray  # (Q, 3, d)
    half_widths: np.ndarray  # (Q, 3) block half-widths of Q
    errors: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.centers.shape[-1]

    def global_majorant(self) -> np.ndarray:
        """``a_k = max_Q |a_{Q,k}|``."""
        if not self.coefficients:
            return np.zeros((2 * self.k_max + 1,) * (3 * self.d))
        return np.max(np.abs(np.stack(self.coefficients)), axis=0)

    def shell_profile(self, power: float = 6.0) -> list:
        """``max_{|k|_inf = s} a_k (1 + s)^power`` for ``s = 0..k_max``."""
        a = self.global_majorant()
        sup = _shell_index(self.k_max, a.ndim)
        return [float(a[sup == s].max() * (1 + s) ** power) for s in range(self.k_max + 1)]

    def phase(self, i: int, xi: np.ndarray) -> np.ndarray:
        """``u = A_Q (xi - c_Q)`` in ``[-pi, pi)`` on the period cell ``8Q``."""
        hw = self.half_widths[i][:, None]
        return np.pi * (xi - self.centers[i]) / (8.0 * hw)

    def chi(self, i: int, n: int, x: np.ndarray) -> np.ndarray:
        """Plateau equal to 1 on ``7Q_n`` and vanishing outside ``8Q_n``; ``x`` has shape ``(..., d)``."""
        hw = self.half_widths[i][n]
        u = np.max(np.abs(np.asarray(x) - self.centers[i][n]), axis=-1)
        return smooth_step((8.0 * hw - u) / hw)

    def evaluate(self, xi: np.ndarray, k_max: int | None = None) -> np.ndarray:
        """Reconstructed ``sum_Q chi_Q sum_k a_{Q,k} e^{i k . u_Q}`` at points ``(..., 3, d)``."""
        xi = np.asarray(xi, dtype=float)
        K = self.k_max if k_max is None else min(k_max, self.k_max)
        out = np.zeros(xi.shape[:-2], dtype=complex)
        ks = np.arange(-K, K + 1)
        for i, a in enumerate(self.coefficients):
            sl = tuple(slice(self.k_max - K, self.k_max + K + 1) for _ in range(a.ndim))
            u = self.phase(i, xi).reshape(xi.shape[:-2] + (-1,))
            E = [np.exp(1j * np.multiply.outer(u[..., ax], ks)) for ax in range(u.shape[-1])]
            chi = np.ones(xi.shape[:-2])
            for n in range(3):
                chi = chi * self.chi(i, n, xi[..., n, :])
            out += chi * _series(a[sl], E)
        return out


def _shell_index(K: int, ndim: int) -> np.ndarray:
    ax = np.abs(np.arange(-K, K + 1))
    return np.max(np.stack(np.meshgrid(*[ax] * ndim, indexing="ij")), axis=0)


def _series(a: np.ndarray, E: list) -> np.ndarray:
    """``sum_k a_k prod_ax E[ax][..., k_ax]`` with broadcasting over leading axes."""
    cur = np.tensordot(E[0], a, axes=([-1], [0]))  # (..., rest)
    lead = E[0].ndim - 1
    for ax in range(1, len(E)):
        e = E[ax].reshape(E[ax].shape + (1,) * (cur.ndim - lead - 1))
        cur = np.sum(cur * e, axis=lead)
    return cur


def _theta(xi: np.ndarray, center: np.ndarray, hw: np.ndarray, a: float) -> np.ndarray:
    """Product bump on ``6Q``: positive exactly on the open box ``6Q``."""
    val = np.ones(xi.shape[:-2])
    for n in range(3):
        t = (xi[..., n, :] - center[n]) / (6.0 * hw[n])
        val = val * np.prod(exp_bump(t, a), axis=-1)
    return val


def expand_symbol(m, G: Gamma, cover, alpha: float = 1.0, k_max: int = 16, samples: int = 64,
                  bump: float = 1.0, tol: float | None = 1e-6, check_points: int = 4000,
                  seed: int = 0) -> SymbolExpansion:
    """Fourier expansion of ``eta_Q m(L^-1 xi)`` on the period cell ``8Q`` of each cover member.

    ``eta_Q = theta_Q / sum theta`` with ``theta_Q`` an exponential bump positive
    exactly on ``6Q``.  Coefficients come from an FFT on ``samples^(3d)`` points
    of the cell; the reconstruction error is measured at random points and
    compared with ``tol`` (relative to ``max |m|`` on the samples).
    """
    bm = G.parent
    d = bm.d
    boxes = list(cover.members)
    if not boxes:
        raise ValueError("empty cover")
    centers = np.stack([Q.center for Q in boxes])
    hws = np.stack([Q.half_widths() for Q in boxes])
    sv = np.exp2(np.asarray(bm.v, float))
    scaled = np.stack([Q.center.ravel() / np.repeat(sv, d) for Q in boxes])
    radii = np.array([Q.radius for Q in boxes])
    tree = cKDTree(scaled)

    def m_tilde(xi):
        return np.broadcast_to(np.asarray(m(bm.apply_inverse(xi)), dtype=complex), xi.shape[:-2])

    K = k_max
    coeffs, errors = [], []
    rng = np.random.default_rng(seed)
    mmax = 0.0
    leak = 0.0
    u1 = -np.pi + 2 * np.pi * np.arange(samples) / samples
    kk = np.fft.fftfreq(samples, 1.0 / samples).astype(int)
    sign = np.where(kk % 2 == 0, 1.0, -1.0)
    sel = np.concatenate([np.arange(samples - K, samples), np.arange(0, K + 1)])
    for i in range(len(boxes)):
        # neighbours whose 6Q meets this 8Q
        nb = tree.query_ball_point(scaled[i], 8 * radii[i] + 6 * radii.max(), p=np.inf)
        nb = sorted(j for j in nb if np.all(np.abs(scaled[j] - scaled[i]) < 8 * radii[i] + 6 * radii[j]))

        def eta_m(xi):
            num = _theta(xi, centers[i], hws[i], bump)
            den = np.zeros_like(num)
            for j in nb:
                den += _theta(xi, centers[j], hws[j], bump)
            mt = m_tilde(xi)
            out = np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0) * mt
            return out, mt, den

        U = np.stack(np.meshgrid(*[u1] * (3 * d), indexing="ij"), axis=-1)
        xi = centers[i][None] + U.reshape(-1, 3, d) * (8.0 * hws[i][:, None] / np.pi)
        g, mt, den = eta_m(xi)
        mmax = max(mmax, float(np.max(np.abs(mt))))
        uncovered = (den == 0) & (np.abs(mt) > 0)
        if np.any(uncovered):
            leak = max(leak, float(np.max(np.abs(mt[uncovered]))))
        g = g.reshape((samples,) * (3 * d))
        A = np.fft.fftn(g) / g.size
        # u_j = -pi + 2 pi j / S  =>  a_k = (-1)^k FFT_k / S^D
        for ax in range(A.ndim):
            shape = [1] * A.ndim
            shape[ax] = samples
            A = A * sign.reshape(shape)
        A = A[np.ix_(*[sel] * A.ndim)]
        coeffs.append(A)
        # reconstruction error at random points of the cell
        Ur = rng.uniform(-np.pi, np.pi, size=(check_points, 3 * d))
        xr = centers[i][None] + Ur.reshape(-1, 3, d) * (8.0 * hws[i][:, None] / np.pi)
        gr, _, _ = eta_m(xr)
        E = [np.exp(1j * np.multiply.outer(Ur[:, ax], np.arange(-K, K + 1))) for ax in range(3 * d)]
        errors.append(float(np.max(np.abs(_series(A, E) - gr))))
    exp = SymbolExpansion(cover, bm, K, samples, coeffs, centers, hws, errors)
    rel = max(errors) / mmax if mmax > 0 else 0.0
    exp.stats = {"max_abs_error": max(errors), "max_symbol": mmax, "relative_error": rel,
                 "uncovered_symbol": leak, "alpha": alpha, "bump": bump}
    if leak > 0:
        raise SupportLeak(f"symbol is nonzero where no eta_Q lives (|m| up to {leak:.3g})")
    if tol is not None and rel > tol:
        raise TruncationTooCoarse(f"reconstruction error {rel:.3g} exceeds {tol:.3g}")
    return exp


def full_form(exp: SymbolExpansion, f, k_max: int | None = None, p=DEFAULT_P,
              tail_tol: float | None = None, certify: bool = False, alpha: float = 1.0) -> FormResult:
    """``sum_Q sum_k a_{Q,k} int prod_n (psi_{Q,k,n} * f_n)`` with ``psihat = chi_{Q,n} e^{i k_n u_n}``."""
    grid = _common_grid(f)
    d = grid.d
    K = exp.k_max if k_max is None else min(k_max, exp.k_max)
    ks = np.arange(-K, K + 1)
    freqs = grid.freqs()
    total = 0.0 + 0.0j
    consts = []
    for i, A in enumerate(exp.coefficients):
        sl = tuple(slice(exp.k_max - K, exp.k_max + K + 1) for _ in range(A.ndim))
        A = A[sl]
        packs = []
        for n in range(3):
            chi = exp.chi(i, n, freqs)
            if not np.any(chi) or not np.any(f[n].spectrum):
                packs = None
                break
            u = np.pi * (freqs - exp.centers[i][n]) / (8.0 * exp.half_widths[i][n])
            phases = 1.0
            grids = np.meshgrid(*[ks] * d, indexing="ij")
            kvec = np.stack([gk.ravel() for gk in grids], axis=-1)  # ((2K+1)^d, d)
            phases = np.exp(1j * np.einsum("...a,ka->k...", u, kvec))
            spec = phases * (chi * f[n].spectrum)[None]
            packs.append(np.stack([grid.inverse(s).reshape(-1) for s in spec]))
            if certify:
                consts.extend(_packet_constants(exp, i, n, grid, phases * chi[None], kvec, alpha))
        if packs is None:
            continue
        a = A.reshape(len(ks) ** d, len(ks) ** d, len(ks) ** d)
        t = np.einsum("ax,bx->abx", packs[0], packs[1])
        t = np.einsum("abx,cx->abc", t, packs[2]) * grid.h**d
        total += np.sum(a * t)
    outer = []
    for A in exp.coefficients:
        sup = _shell_index(exp.k_max, A.ndim)
        outer.append(float(np.abs(A[sup == K]).sum()))
    tail = max(outer) if outer else 0.0
    if tail_tol is not None and tail > tail_tol:
        raise TailTooLarge(f"outer-shell coefficient mass {tail:.3g} exceeds {tail_tol:.3g}")
    extra = {"k_max": K, "outer_shell_mass": tail}
    if certify and consts:
        extra["packet_constant_min"] = float(min(consts))
        extra["packet_constant_max"] = float(max(consts))
    return _result(total, f, "expansion", p, **extra)


def _packet_constants(exp, i, n, grid, spectra, kvec, alpha) -> list:
    """Largest ``c`` with ``c (1+|k_n|)^(-4 alpha) psi`` under the ``Phi_n^(4 alpha)`` majorant of ``8Q``."""
    Q = exp.cover.members[i]
    r = 8.0 * Q.radius
    spec = CutoffSpec("PHI", n, Q.center, math.floor(-math.log2(r)), 4 * alpha, Q.v, radius=r)
    M = majorant(spec, grid)
    out = []
    for s, k in zip(spectra, kvec):
        v = np.abs(grid.inverse(s)) * (1 + float(np.max(np.abs(k)))) ** (-4 * alpha)
        nz = v > 0
        out.append(float(np.min(M[nz] / v[nz])) if nz.any() else math.inf)
    return out


def smooth_symbol(block_map, support: Box, a: float = 4.0, width: float = 1.0, tilt: float = 0.5):
    """Smooth test symbol: a product bump on ``width * support`` times ``1 + tilt * xi_{1,1}``."""
    c = support.center
    hw = support.half_widths()[:, None] * width

    def m(eta):
        xi = block_map.apply(eta)
        t = (xi - c) / hw
        return np.prod(exp_bump(t[..., 0], a), axis=-1) * (1 + tilt * xi[..., 0, 0])

    return m
