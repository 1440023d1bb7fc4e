import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseplane.errors import EmptySet, NotNonTrivial, NotQuasiconformal, Singular
from phaseplane.geometry import (
    BlockMap,
    Cube,
    DyadicCube,
    cube_from_interval,
    gamma_box_intersects,
    gamma_box_witness,
    make_box,
    op_norm,
    rho,
    rho_set,
    validate_block_map,
)


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestValidateBlockMap:
    def test_conformal_identity(self, conformal_map):
        assert conformal_map.v == (0, 0, 1)
        assert conformal_map.n_star in (0, 1)

    def test_rotation_is_conformal(self):
        R = rotation(0.7)
        assert op_norm(R) ** 2 == pytest.approx(abs(np.linalg.det(R)))
        bm = validate_block_map(R, R, -2 * R, K=1.0)
        assert bm.v == (0, 0, 1)

    def test_d1_uses_absolute_determinant(self, bht_map):
        assert bht_map.v == (0, 0, 1)
        assert op_norm(bht_map.L[2]) == 2

    def test_normalization_shift(self):
        bm = validate_block_map(4.0, 4.0, -8.0)
        assert bm.v == (0, 0, 1)
        assert bm.scale == 0.25
        assert bm.L[0, 0, 0] == 1.0

    def test_errors(self):
        with pytest.raises(NotNonTrivial):
            validate_block_map(1.0, 1.0, -1.0)
        with pytest.raises(Singular):
            validate_block_map(np.eye(2), -np.eye(2), np.zeros((2, 2)))
        A = np.diag([4.0, 0.25])
        with pytest.raises(NotQuasiconformal):
            validate_block_map(A, np.eye(2), -(A + np.eye(2)), K=2.0)

    def test_json_round_trip(self, anisotropic_map):
        again = BlockMap.from_dict(anisotropic_map.to_dict())
        assert np.array_equal(again.L, anisotropic_map.L)
        assert again.v == anisotropic_map.v


class TestRho:
    def test_examples(self):
        I = cube_from_interval(0.0, 1.0)
        assert rho(I, 0.5) == 1.0
        assert rho(I, 2.5) == pytest.approx(2.5)
        J = cube_from_interval([0.0, 0.0], 2.0)
        assert rho(J, np.array([1.0, 1.0])) == 1.0

    def test_bisection_oracle(self):
        I = cube_from_interval(0.0, 1.0)

        def inside(r, x):  # x in (2r-1) I, open dilate
            return abs(x - 0.5) < (2 * r - 1) / 2

        lo, hi = 1.0, 100.0
        for _ in range(200):
            mid = (lo + hi) / 2
            lo, hi = (lo, mid) if inside(mid, 2.5) else (mid, hi)
        assert rho(I, 2.5) == pytest.approx(hi, abs=1e-12)

    def test_rho_set(self):
        I = cube_from_interval(0.0, 1.0)
        assert rho_set(I, [0.5]) == 1.0
        assert rho_set(I, [2.5, 3.5]) == pytest.approx(2.5)
        assert rho_set(I, [0.1, 0.9]) == 1.0
        with pytest.raises(EmptySet):
            rho_set(I, [])

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(-10, 10),
        st.floats(-10, 10),
        st.floats(0.1, 5),
        st.floats(0.1, 10),
    )
    def test_scale_covariance(self, c, x, side, lam):
        I = Cube(np.array([c]), side)
        J = Cube(np.array([c]), lam * side)
        y = lam * x + (1 - lam) * c
        assert rho(J, y) == pytest.approx(rho(I, x), rel=1e-9, abs=1e-9)

    def test_monotone_outside(self, rng):
        I = cube_from_interval([0.0, 0.0], 1.0)
        r = np.linspace(0.6, 5, 50)
        vals = rho(I, np.stack([0.5 + r, 0.5 + 0 * r], axis=-1))
        assert np.all(np.diff(vals) > 0)


class TestDyadic:
    @settings(max_examples=300, deadline=None)
    @given(
        st.integers(-4, 4),
        st.integers(-4, 4),
        st.tuples(st.integers(-40, 40), st.integers(-40, 40)),
        st.tuples(st.integers(-40, 40), st.integers(-40, 40)),
    )
    def test_nested_or_disjoint(self, k1, k2, l1, l2):
        A, B = DyadicCube(k1, l1), DyadicCube(k2, l2)
        lo_a, lo_b = A.lower, B.lower
        overlap = np.all(np.maximum(lo_a, lo_b) < np.minimum(lo_a + A.side, lo_b + B.side))
        nested = A.contains(B) or B.contains(A)
        assert overlap == nested

    def test_children_partition(self):
        Q = DyadicCube(2, (1, -3))
        kids = Q.children()
        assert len(kids) == 4
        assert all(Q.contains(k) and k.parent() == Q for k in kids)
        assert sum(k.volume for k in kids) == Q.volume


class TestBox:
    def test_box_geometry(self, bht_map, rng):
        Q = make_box(bht_map, [[0.375], [-1.0], [2.0]], 0.25)
        hw = Q.half_widths()
        assert list(hw) == [0.25, 0.25, 0.5]
        # each face touches the ball B(xi_n, 2^{v_n} r) (minimality)
        for n in range(3):
            lo, hi = Q.block(n)
            assert hi[0] - Q.center[n, 0] == hw[n]
            assert Q.center[n, 0] - lo[0] == hw[n]

    def test_box_contains_ball_2d(self, conformal_map, rng):
        Q = make_box(conformal_map, rng.normal(size=(3, 2)), 0.5)
        for n in range(3):
            r = Q.half_widths()[n]
            ang = rng.uniform(0, 2 * np.pi, 500)
            pts = Q.center[n] + 0.999999 * r * np.stack([np.cos(ang), np.sin(ang)], -1)
            assert np.all(Q.block_contains(n, pts))
            # tangency: the axis points of the ball lie on the boundary
            for e in np.eye(2):
                assert not Q.block_contains(n, Q.center[n] + r * e)


class TestGammaIntersection:
    def test_examples(self, bht_map):
        G = bht_map.gamma
        assert gamma_box_intersects(G, make_box(bht_map, [[0.0], [0.0], [0.0]], 1e-3))
        assert not gamma_box_intersects(G, make_box(bht_map, [[10.0], [-10.0], [0.0]], 1.0))
        tau = np.linspace(-100, 100, 2_000_001)
        Q = make_box(bht_map, [[10.0], [-10.0], [0.0]], 1.0)
        hit = (
            (np.abs(tau - 10) < 1) & (np.abs(tau + 10) < 1) & (np.abs(-2 * tau) < 2)
        )
        assert not hit.any()
        for t0 in (-3.7, 0.0, 12.25):
            Q = make_box(bht_map, G.point([t0]), 1e-6)
            assert gamma_box_intersects(G, Q)

    def test_distance_matches_clipping(self, conformal_map, anisotropic_map, rng):
        for bm in (conformal_map, anisotropic_map):
            G = bm.gamma
            for _ in range(200):
                xi = rng.normal(size=(3, 2)) * 3
                dist = G.box_distance_exact(xi)
                r_in, r_out = float(dist) * 1.001, float(dist) * 0.999
                assert gamma_box_intersects(G, make_box(bm, xi, r_in))
                assert not gamma_box_intersects(G, make_box(bm, xi, r_out))

    def test_witness_lies_in_boxes(self, anisotropic_map, rng):
        G = anisotropic_map.gamma
        found = 0
        for _ in range(300):
            Q = make_box(anisotropic_map, rng.normal(size=(3, 2)) * 2, rng.uniform(0.2, 2))
            tau = gamma_box_witness(G, Q)
            if tau is not None:
                found += 1
                assert Q.contains(G.point(tau))
        assert found > 20

    def test_nearest_attains_distance(self, bht_map, anisotropic_map, rng):
        for bm in (bht_map, anisotropic_map):
            G = bm.gamma
            for _ in range(30):
                xi = rng.normal(size=(3, bm.d)) * 2
                p = G.nearest(xi)
                hw = np.exp2(np.asarray(bm.v, float))[:, None]
                attained = np.max(np.abs(p - xi) / hw)
                assert attained == pytest.approx(G.box_distance(xi), rel=1e-7, abs=1e-9)
