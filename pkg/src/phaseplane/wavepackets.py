"""Sampled functions on a periodized grid and the frequency cut-off classes.

A :class:`SampledField` holds samples on ``x_j = -R + j h`` (``h = 2R / 2^m`` per
axis) together with the Fourier transform sampled on the reciprocal lattice
``xi_k = k / (2R)``, ``-2^(m-1) <= k < 2^(m-1)``, stored in centred order:

    fhat(xi_k) = h^d * sum_j f(x_j) exp(-2 pi i x_j . xi_k)

so that the grid sums mimic the continuous transform.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadShape, EmptyProjection, GridMismatch, GridTooCoarse, SetTooSmallForGrid
from .geometry import cube_from_interval, rho

SUPPORT_RTOL = 1e-12
MARGIN_STEPS = 2
SAFETY = 1e-12  # keeps grid ratios <= 1 after round-off
NOISE_FLOOR = 1e-13  # samples below this fraction of the peak are FFT round-off
ROUNDOFF = 1e-14  # absolute slack (relative to the peak) added when normalizing
TAPER = 9.0  # Gaussian taper of the PHI bump, in units of its half-width


@dataclass(frozen=True)
class Grid:
    d: int
    R: float
    m: int

    @property
    def n(self) -> int:
        return 1 << self.m

    @property
    def h(self) -> float:
        return 2.0 * self.R / self.n

    @property
    def step(self) -> float:
        """Reciprocal lattice spacing."""
        return 1.0 / (2.0 * self.R)

    @property
    def nyquist(self) -> float:
        return self.n * self.step / 2.0

    def x_axis(self) -> np.ndarray:
        return -self.R + self.h * np.arange(self.n)

    def freq_axis(self) -> np.ndarray:
        return self.step * np.arange(-(self.n // 2), self.n // 2)

    def points(self) -> np.ndarray:
        """Spatial grid points, shape ``(n,)*d + (d,)``."""
        ax = self.x_axis()
        return np.stack(np.meshgrid(*[ax] * self.d, indexing="ij"), axis=-1)

    def freqs(self) -> np.ndarray:
        ax = self.freq_axis()
        return np.stack(np.meshgrid(*[ax] * self.d, indexing="ij"), axis=-1)

    def _sign(self) -> np.ndarray:
        k = np.arange(-(self.n // 2), self.n // 2)
        s = np.where(k % 2 == 0, 1.0, -1.0)
        out = s
        for _ in range(self.d - 1):
            out = np.multiply.outer(out, s)
        return out

    def forward(self, values: np.ndarray) -> np.ndarray:
        axes = tuple(range(self.d))
        spec = np.fft.fftshift(np.fft.fftn(values, axes=axes), axes=axes)
        return spec * self._sign() * self.h**self.d

    def inverse(self, spec: np.ndarray) -> np.ndarray:
        axes = tuple(range(self.d))
        raw = np.fft.ifftshift(spec * self._sign(), axes=axes)
        return np.fft.ifftn(raw, axes=axes) / self.h**self.d

    def to_dict(self) -> dict:
        return {"d": self.d, "R": self.R, "m": self.m}


@dataclass(frozen=True, eq=False)
class SampledField:
    grid: Grid
    values: np.ndarray
    spectrum: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def R(self) -> float:
        return self.grid.R

    @property
    def m(self) -> int:
        return self.grid.m

    @classmethod
    def from_spectrum(cls, grid: Grid, spectrum, meta=None) -> "SampledField":
        spectrum = np.asarray(spectrum, dtype=complex)
        if spectrum.shape != (grid.n,) * grid.d:
            raise BadShape(f"spectrum shape {spectrum.shape} does not match grid")
        return cls(grid, grid.inverse(spectrum), spectrum, dict(meta or {}))

    def with_values(self, values, meta=None) -> "SampledField":
        return make_field(values, self.R, d=self.d, meta=meta)

    def __add__(self, other: "SampledField") -> "SampledField":
        _check_same_grid(self, other)
        return SampledField(self.grid, self.values + other.values, self.spectrum + other.spectrum)

    def scale(self, c: complex) -> "SampledField":
        return SampledField(self.grid, c * self.values, c * self.spectrum, dict(self.meta))

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.h**self.d))

    def spectral_l2_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.spectrum) ** 2) * self.grid.step**self.d))

    def lp_norm(self, p: float) -> float:
        h = self.grid.h**self.d
        if math.isinf(p):
            return float(np.max(np.abs(self.values)))
        return float((np.sum(np.abs(self.values) ** p) * h) ** (1.0 / p))

    def convolve(self, other: "SampledField") -> "SampledField":
        """Periodic convolution ``int f(y) g(x - y) dy`` on the torus."""
        _check_same_grid(self, other)
        return SampledField.from_spectrum(self.grid, self.spectrum * other.spectrum)

    def modulate(self, eta) -> "SampledField":
        """Multiply by ``exp(2 pi i x . eta)``; ``eta`` is snapped to the reciprocal lattice."""
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        k = np.round(eta / self.grid.step).astype(int)
        spec = self.spectrum
        for ax in range(self.d):
            spec = _shift_axis(spec, int(k[ax]), ax)
        return SampledField.from_spectrum(self.grid, spec, self.meta)

    def translate(self, y) -> "SampledField":
        """``f(x - y)`` via a spectral phase factor (periodic)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        phase = np.exp(-2j * np.pi * (self.grid.freqs() @ y))
        return SampledField.from_spectrum(self.grid, self.spectrum * phase, self.meta)

    def to_bytes(self) -> bytes:
        head = struct.pack("<iid", self.d, self.m, float(self.R))
        return head + np.ascontiguousarray(self.values, dtype="<c16").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SampledField":
        d, m, R = struct.unpack("<iid", data[:16])
        vals = np.frombuffer(data[16:], dtype="<c16")
        return make_field(vals.astype(complex), R, d=d)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SampledField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _shift_axis(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(k) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if k >= 0:
        src[axis], dst[axis] = slice(0, n - k), slice(k, n)
    else:
        src[axis], dst[axis] = slice(-k, n), slice(0, n + k)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _check_same_grid(a: SampledField, b: SampledField) -> None:
    if a.grid != b.grid:
        raise GridMismatch(f"{a.grid} != {b.grid}")


def make_field(samples, R: float, d: int | None = None, meta=None) -> SampledField:
    """Wrap grid samples on ``[-R, R)^d``; accepts a flat or a ``(2^m,)*d`` array."""
    a = np.asarray(samples, dtype=complex)
    if d is None:
        d = a.ndim
    if d not in (1, 2):
        raise BadShape("only d = 1, 2 are supported")
    total = a.size
    n = round(total ** (1.0 / d))
    if n**d != total or n < 2 or n & (n - 1):
        raise BadShape(f"{total} samples is not (2^m)^{d}")
    a = a.reshape((n,) * d)
    grid = Grid(d, float(R), n.bit_length() - 1)
    return SampledField(grid, a, grid.forward(a), dict(meta or {}))


@dataclass(frozen=True)
class PacketRecipe:
    """Gaussian envelope times a finite sum of plane waves; analytic at any point.

    ``modes`` are frequencies (``(K, d)``) with complex ``amps``; the field is
    ``exp(-|x - x0|^2 / (2 sigma^2)) sum_k amps_k exp(2 pi i modes_k . x)``.
    """

    x0: tuple
    sigma: float
    modes: tuple
    amps: tuple

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - np.asarray(self.x0)) ** 2, axis=-1)
        w = np.exp(2j * np.pi * (x @ np.asarray(self.modes).T)) @ np.asarray(self.amps)
        return np.exp(-r2 / (2 * self.sigma**2)) * w

    def sample(self, grid: Grid, rotation: np.ndarray | None = None) -> SampledField:
        """Samples of ``x -> self(rotation^T x)`` (a rotated copy when given)."""
        x = grid.points()
        if rotation is not None:
            x = x @ np.asarray(rotation)
        return make_field(self(x), grid.R, d=grid.d)


def random_packet(rng: np.random.Generator, d: int, band: float, sigma: float,
                  modes: int = 4, spread: float = 0.0) -> PacketRecipe:
    """Random recipe with mode frequencies in ``[-band, band]^d``, centre within ``spread``."""
    x0 = rng.uniform(-spread, spread, size=d) if spread > 0 else np.zeros(d)
    freqs = rng.uniform(-band, band, size=(modes, d))
    amps = rng.normal(size=modes) + 1j * rng.normal(size=modes)
    return PacketRecipe(tuple(x0.tolist()), float(sigma), tuple(map(tuple, freqs.tolist())),
                        tuple(complex(a) for a in amps))


# ---------------------------------------------------------------- profiles


def smooth_step(u) -> np.ndarray:
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def plateau(t) -> np.ndarray:
    """Even bump equal to 1 on ``|t| <= 1/2`` and vanishing for ``|t| >= 1``."""
    return smooth_step(2.0 * (1.0 - np.abs(t)))


# ---------------------------------------------------------------- cut-offs

KINDS = ("PHI", "PSI", "MIKHLIN")


@dataclass(frozen=True)
class CutoffSpec:
    """Target of a cut-off.

    PHI: ``E = Q(xi, radius)`` (default radius ``2^-j``);
    PSI: ``E = Q(xi, 2^-j) minus Q(xi, 2^-(j+2))``;
    MIKHLIN: the cone around ``xi_n`` in direction ``delta`` (index into ``+-e_i``).
    """

    kind: str
    n: int
    xi: tuple
    j: int
    alpha: float
    v: tuple
    radius: float | None = None
    delta: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cut-off class {self.kind!r}")
        if not 0 <= self.n < 3:
            raise ValueError("block index must be 0, 1 or 2")
        object.__setattr__(self, "xi", tuple(tuple(float(c) for c in row) for row in np.asarray(self.xi, float).reshape(3, -1)))
        object.__setattr__(self, "v", tuple(int(x) for x in self.v))
        if self.kind == "PHI" and self.radius is not None:
            if math.floor(-math.log2(self.radius)) != self.j:
                raise ValueError("j must be maximal with radius <= 2^-j")
        if self.kind == "MIKHLIN" and (self.delta is None or not 0 <= self.delta < 2 * self.d):
            raise ValueError("MIKHLIN cut-offs need a direction index delta")

    @property
    def d(self) -> int:
        return len(self.xi[0])

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.xi[self.n], dtype=float)

    @property
    def outer(self) -> float:
        """Half-width of the n-projection (outer box)."""
        r = self.radius if (self.kind == "PHI" and self.radius is not None) else 2.0**-self.j
        return 2.0 ** self.v[self.n] * r

    @property
    def inner(self) -> float:
        return self.outer / 4.0 if self.kind == "PSI" else 0.0

    def as_phi(self) -> "CutoffSpec":
        return replace(self, kind="PHI", radius=None, delta=None)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "xi": [list(r) for r in self.xi],
            "j": self.j,
            "alpha": self.alpha,
            "v": list(self.v),
            "radius": self.radius,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CutoffSpec":
        return cls(
            data["kind"],
            int(data["n"]),
            data["xi"],
            int(data["j"]),
            float(data["alpha"]),
            tuple(data["v"]),
            data.get("radius"),
            data.get("delta"),
        )


def majorant(spec: CutoffSpec, grid: Grid) -> np.ndarray:
    """``2^((v_n - j) d) rho_I(x)^-alpha`` with ``I = [0, 2^(j - v_n))^d`` on the grid."""
    d = grid.d
    e = spec.j - spec.v[spec.n]
    I = cube_from_interval(np.zeros(d), 2.0**e)
    pts = grid.points()
    return 2.0 ** (-e * d) * rho(I, pts) ** (-spec.alpha)


def projection_mask(spec: CutoffSpec, grid: Grid) -> np.ndarray:
    """Reciprocal lattice points inside the n-projection of E."""
    tau = grid.freqs() - spec.center
    if spec.kind == "MIKHLIN":
        return _cone_mask(tau, spec.delta)
    sup = np.max(np.abs(tau), axis=-1)
    mask = sup < spec.outer
    if spec.kind == "PSI":
        mask &= sup > spec.inner
    return mask


def _band_clip(center: np.ndarray, hw: float, grid: Grid):
    """Intersect ``center +- hw`` with the frequency band, per axis."""
    lo = np.maximum(center - hw, -grid.nyquist)
    hi = np.minimum(center + hw, grid.nyquist - grid.step)
    if np.any(hi <= lo):
        raise EmptyProjection("projection of E misses the frequency band")
    return (lo + hi) / 2.0, (hi - lo) / 2.0


def _bump_spectrum(spec: CutoffSpec, grid: Grid, tau: np.ndarray | None = None) -> np.ndarray:
    """Bump for ``spec`` laid out on ``grid``; evaluated at ``tau`` (default: the grid lattice)."""
    step = grid.step
    c, hw = _band_clip(spec.center, spec.outer, grid)
    a = hw - MARGIN_STEPS * step
    if np.any(a < 2 * step):
        raise SetTooSmallForGrid("projection of E is narrower than 4 reciprocal steps")
    tau = grid.freqs() if tau is None else tau
    t = (tau - c) / a
    outer = np.prod(plateau(t), axis=-1)
    if spec.kind == "PHI":
        # the Gaussian taper pushes the spatial tail under the round-off floor
        return outer * np.exp(-0.5 * TAPER**2 * np.sum(t**2, axis=-1))
    # annulus: kill a neighbourhood of the closed inner box
    w_in = spec.inner + MARGIN_STEPS * step
    w_out = (spec.inner + spec.outer) / 2.0
    if w_out - w_in < 2 * step or np.any(a <= w_out):
        raise SetTooSmallForGrid("annulus too thin for the grid")
    u = np.max(np.abs(tau - spec.center), axis=-1)
    hole = smooth_step((w_out - u) / (w_out - w_in))
    return outer * (1.0 - hole)


def resolved(mag: np.ndarray) -> np.ndarray:
    """Samples above the round-off floor; the class bound is checked only there."""
    return mag > NOISE_FLOOR * float(np.max(mag)) if mag.size else mag > 0


def normalization(mag: np.ndarray, M: np.ndarray) -> float:
    """Largest ``c`` with ``c |phi| <= M`` on resolved samples, robust to round-off."""
    nz = resolved(mag)
    slack = ROUNDOFF * float(np.max(mag))
    return float(np.min(M[nz] / (mag[nz] + slack))) * (1.0 - SAFETY)


def make_cutoff(spec: CutoffSpec, grid: Grid) -> SampledField:
    """Canonical representative of the cut-off class, scaled to meet its majorant on the grid."""
    if grid.d != spec.d:
        raise BadShape("grid and spec dimensions differ")
    if spec.kind == "MIKHLIN":
        pieces = make_mikhlin_cone_partition(spec.center, spec.n, grid, v_n=spec.v[spec.n])
        piece = pieces[spec.delta]
        c = piece.meta["normalization"]
        return SampledField(piece.grid, c * piece.values, c * piece.spectrum,
                            {"normalization": 1.0, "scaled_by": c, "spec": spec.to_dict()})
    phat = _bump_spectrum(spec, grid)
    if not np.any(phat):
        raise EmptyProjection("bump vanishes on the reciprocal lattice")
    f = SampledField.from_spectrum(grid, phat)
    M = majorant(spec, grid)
    mag = np.abs(f.values)
    c = normalization(mag, M)
    return SampledField(grid, c * f.values, c * f.spectrum, {"normalization": c, "spec": spec.to_dict()})


def verify_membership(phi: SampledField, spec: CutoffSpec) -> dict:
    """Grid check of the class conditions.

    ``decay_ratio`` is the largest ratio of ``|phi|`` to the class majorant (for
    MIKHLIN: the finite-difference Mikhlin ratio times the stored normalization),
    ``support_ok`` requires the spectral energy outside the projection of E to be
    at most ``1e-12`` of the total.
    """
    grid = phi.grid
    mask = projection_mask(spec, grid)
    energy = np.abs(phi.spectrum) ** 2
    total = float(energy.sum())
    leak = float(energy[~mask].sum()) / total if total > 0 else 0.0
    if spec.kind == "MIKHLIN":
        raw = mikhlin_ratio(phi.spectrum, spec.center, grid, spec.v[spec.n])
        ratio = raw * float(phi.meta.get("normalization", 1.0))
    else:
        M = majorant(spec, grid)
        mag = np.abs(phi.values)
        ratio = float(np.max(mag[resolved(mag)] / M[resolved(mag)])) if np.any(mag) else 0.0
    return {"decay_ratio": ratio, "support_ok": leak <= SUPPORT_RTOL, "spectral_leak": leak}


# ---------------------------------------------------------------- cones


def cone_directions(d: int) -> np.ndarray:
    """``e_1, -e_1, e_2, -e_2, ...``"""
    out = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        out.extend([e, -e])
    return np.array(out)


def _cone_mask(tau: np.ndarray, delta: int) -> np.ndarray:
    e = cone_directions(tau.shape[-1])[delta]
    norm = np.sqrt(np.sum(tau**2, axis=-1))
    return norm <= 2.0 * (tau @ e) + 1e-12 * np.maximum(norm, 1.0)


def _cone_weights(tau: np.ndarray) -> np.ndarray:
    """Raw angular weights, one per direction, shape ``(2d,) + tau.shape[:-1]``."""
    d = tau.shape[-1]
    dirs = cone_directions(d)
    norm = np.sqrt(np.sum(tau**2, axis=-1))
    safe = np.where(norm > 0, norm, 1.0)
    cos = np.stack([(tau @ e) / safe for e in dirs])
    if d == 1:
        w = (cos > 0).astype(float)
    else:
        # positive exactly for angles below 60 degrees; every direction is
        # within 45 degrees of some +-e_i, so the weights never vanish together
        w = smooth_step((cos - 0.5) / 0.5)
    w[:, norm == 0] = 1.0
    return w


def mikhlin_ratio(spec_values: np.ndarray, center, grid: Grid, v_n: int, min_steps: float = 4.0) -> float:
    """``max |(tau - c)^beta d^beta mu(tau)| 2^(v_n |beta|)`` over ``1 <= |beta| <= 2``.

    Central differences on the reciprocal lattice, restricted to points at least
    ``min_steps`` steps from the centre and one step from the grid edge.
    """
    mu = np.real_if_close(spec_values)
    h = grid.step
    d = grid.d
    tau = grid.freqs() - np.asarray(center, float)
    far = np.sqrt(np.sum(tau**2, axis=-1)) >= min_steps * h
    inner = tuple(slice(1, -1) for _ in range(d))
    far = far[inner]
    best = 0.0
    for order in (1, 2):
        for beta in itertools.product(range(order + 1), repeat=d):
            if sum(beta) != order:
                continue
            deriv = _central_diff(mu, beta, h)
            weight = np.ones(far.shape)
            for ax, b in enumerate(beta):
                weight = weight * np.abs(tau[inner][..., ax]) ** b
            val = np.abs(deriv) * weight * 2.0 ** (v_n * order)
            if np.any(far):
                best = max(best, float(np.max(val[far])))
    return best


def _central_diff(a: np.ndarray, beta, h: float) -> np.ndarray:
    d = a.ndim
    inner = tuple(slice(1, -1) for _ in range(d))

    def sl(offsets):
        return tuple(slice(1 + o, a.shape[i] - 1 + o) for i, o in enumerate(offsets))

    if sum(beta) == 1:
        ax = beta.index(1)
        plus = [0] * d
        minus = [0] * d
        plus[ax], minus[ax] = 1, -1
        return (a[sl(plus)] - a[sl(minus)]) / (2 * h)
    if max(beta) == 2:
        ax = beta.index(2)
        plus = [0] * d
        minus = [0] * d
        plus[ax], minus[ax] = 1, -1
        return (a[sl(plus)] - 2 * a[inner] + a[sl(minus)]) / h**2
    # mixed second derivative
    i, k = [ax for ax, b in enumerate(beta) if b == 1]
    acc = 0
    for si, sk in itertools.product((1, -1), repeat=2):
        off = [0] * d
        off[i], off[k] = si, sk
        acc = acc + si * sk * a[sl(off)]
    return acc / (4 * h**2)


def make_mikhlin_cone_partition(xi, n: int, grid: Grid, v_n: int = 0) -> list:
    """Pieces ``mu^(delta, n)``, delta over ``+-e_i``, with spectra summing to 1 off ``xi``.

    Each spectrum is supported in ``{|tau - xi| <= 2 (tau - xi) . e_delta}``.  The
    pieces are homogeneous of degree 0 around ``xi``; their Mikhlin constant is
    measured and stored as ``meta['normalization'] = min(1, 1 / ratio)``.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (grid.d,):
        raise BadShape("xi must be a point of R^d")
    margin = 4 * grid.step
    if np.any(np.abs(xi) > grid.nyquist - margin):
        raise GridTooCoarse("centre too close to the edge of the frequency band")
    tau = grid.freqs() - xi
    w = _cone_weights(tau)
    mus = w / w.sum(axis=0)
    ratio = max(mikhlin_ratio(mu, xi, grid, v_n) for mu in mus)
    c = 1.0 if ratio <= 1.0 else (1.0 - SAFETY) / ratio
    out = []
    for delta, mu in enumerate(mus):
        f = SampledField.from_spectrum(grid, mu)
        out.append(SampledField(grid, f.values, f.spectrum,
                                {"normalization": c, "mikhlin_ratio": ratio, "delta": delta, "center": xi.tolist()}))
    return out
