import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roughrobust.rough_core import (
    ControlledPath, GridMismatchError, NonFiniteError, RoughPath, RoughPathError, TimeGrid,
    anchored_levels, chen_extend, check_chen, check_geometric, concat_cells, distance_terms,
    ito_to_stratonovich, lift_piecewise_linear, lift_smooth_quadrature, read_columnar, restrict,
    rough_distance, rough_seminorm, seminorm_terms, stratonovich_to_ito, sup_distance, write_columnar,
)


def random_lift(seed, n=64, d=2, scale=0.1):
    rng = np.random.default_rng(seed)
    samples = np.cumsum(rng.normal(0, scale, (n + 1, d)), axis=0)
    return lift_piecewise_linear(samples, TimeGrid.uniform(n))


corner = lift_piecewise_linear(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]), TimeGrid.uniform(2))


# grids -------------------------------------------------------------------

def test_grid_rejects_non_increasing_points():
    with pytest.raises(RoughPathError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(RoughPathError):
        TimeGrid(np.array([0.0]))


def test_grid_mesh_and_uniformity():
    g = TimeGrid(np.array([0.0, 0.1, 0.4, 1.0]))
    assert g.mesh() == pytest.approx(0.6)
    assert not g.is_uniform()
    assert TimeGrid.uniform(8, t_end=2.0).is_uniform()


# lifts -------------------------------------------------------------------

def test_constant_path_lifts_to_zero():
    rp = lift_piecewise_linear(np.full((5, 3), 2.5), TimeGrid.uniform(4))
    assert not rp.increments.any() and not rp.second_level.any()


def test_linear_path_hand_values():
    rp = lift_piecewise_linear(np.array([0.0, 0.5, 1.0]), TimeGrid.uniform(2))
    x, xx = chen_extend(rp, 0, 2)
    assert x[0] == pytest.approx(1.0)
    assert xx[0, 0] == pytest.approx(0.5)


def test_corner_path_full_span():
    x, xx = chen_extend(corner, 0, 2)
    np.testing.assert_allclose(xx, [[0.5, 1.0], [0.0, 0.5]], atol=1e-15)
    assert 0.5 * (xx[0, 1] - xx[1, 0]) == pytest.approx(0.5)
    _, yy = anchored_levels(corner)(0, 2)
    np.testing.assert_allclose(yy, xx, atol=1e-15)


def test_non_finite_sample_reports_index():
    s = np.zeros((5, 2))
    s[3, 1] = np.nan
    with pytest.raises(NonFiniteError) as info:
        lift_piecewise_linear(s, TimeGrid.uniform(4))
    assert tuple(info.value.index) == (3, 1)


def test_exponent_outside_range_rejected():
    with pytest.raises(RoughPathError):
        lift_piecewise_linear(np.zeros(3), TimeGrid.uniform(2), hoelder_exponent=0.3)


def test_quadrature_lift_polynomial_exact():
    rp = lift_smooth_quadrature(lambda t: t ** 2, lambda t: 2 * t, TimeGrid.uniform(1), quad_order=2)
    assert rp.second_level[0, 0, 0] == pytest.approx(0.5, abs=1e-14)


def test_quadrature_lift_constant_is_zero():
    rp = lift_smooth_quadrature(lambda t: np.ones_like(t), lambda t: np.zeros_like(t), TimeGrid.uniform(4))
    assert not rp.second_level.any()


def test_quarter_circle_area_matches_riemann_oracle():
    grid = TimeGrid.uniform(64, t_end=np.pi / 2)
    rp = lift_smooth_quadrature(lambda t: np.stack([np.cos(t), np.sin(t)], -1),
                                lambda t: np.stack([-np.sin(t), np.cos(t)], -1), grid, quad_order=4)
    _, xx = chen_extend(rp, 0, 64)
    area = 0.5 * (xx[0, 1] - xx[1, 0])
    # Riemann-sum oracle of int (x - x0) dy - (y - y0) dx over a fine midpoint mesh
    n = 10 ** 6
    t = (np.arange(n) + 0.5) * (np.pi / 2) / n
    dt = (np.pi / 2) / n
    x, y = np.cos(t) - 1.0, np.sin(t)
    oracle = 0.5 * np.sum(x * np.cos(t) - y * (-np.sin(t))) * dt
    assert area == pytest.approx(oracle, abs=1e-8)
    assert area == pytest.approx(np.pi / 4 - 0.5, abs=1e-8)


def test_quadrature_lift_is_geometric():
    grid = TimeGrid.uniform(32)
    rp = lift_smooth_quadrature(lambda t: np.stack([np.sin(3 * t), t ** 3], -1),
                                lambda t: np.stack([3 * np.cos(3 * t), 3 * t ** 2], -1), grid, quad_order=6)
    assert check_geometric(rp, tol=1e-8).passed


# Chen --------------------------------------------------------------------

def test_chen_extend_base_case_returns_cell():
    rp = random_lift(1)
    x, xx = chen_extend(rp, 5, 6)
    np.testing.assert_array_equal(x, rp.increments[5])
    np.testing.assert_array_equal(xx, rp.second_level[5])


def test_chen_extend_rejects_bad_order():
    with pytest.raises(RoughPathError):
        chen_extend(random_lift(1), 4, 4)


def test_chen_extend_zero_cells():
    rp = lift_piecewise_linear(np.zeros((4, 2)), TimeGrid.uniform(3))
    x, xx = chen_extend(rp, 0, 3)
    assert not x.any() and not xx.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), i=st.integers(0, 20), gap1=st.integers(1, 20), gap2=st.integers(1, 20))
def test_chen_associativity(seed, i, gap1, gap2):
    rp = random_lift(seed, n=64)
    u, j = i + gap1, i + gap1 + gap2
    x_iu, xx_iu = chen_extend(rp, i, u)
    x_uj, xx_uj = chen_extend(rp, u, j)
    _, xx_ij = chen_extend(rp, i, j)
    np.testing.assert_allclose(xx_ij, xx_iu + xx_uj + np.outer(x_iu, x_uj), atol=1e-12)


def test_check_chen_on_lifts():
    assert check_chen(random_lift(2, n=512)).passed
    zero = lift_piecewise_linear(np.zeros((9, 2)), TimeGrid.uniform(8))
    assert check_chen(zero).residual == 0.0


def test_check_chen_detects_corrupted_cell():
    rp = random_lift(3, n=128)
    good = anchored_levels(rp)

    def corrupted(i, j):
        x, xx = good(i, j)
        if (i, j) == (40, 41):
            xx = xx.copy()
            xx[1, 0] += 1e-3
        return x, xx

    r = check_chen(rp, levels=corrupted)
    assert r.residual >= 1e-3 * (1 - 1e-9)
    assert not r.passed


def test_restrict_matches_chen_extend():
    rp = random_lift(4, n=32)
    idx = np.array([0, 3, 10, 11, 32])
    sub = restrict(rp, idx)
    for k in range(idx.size - 1):
        x, xx = chen_extend(rp, idx[k], idx[k + 1])
        np.testing.assert_allclose(sub.increments[k], x, atol=1e-14)
        np.testing.assert_allclose(sub.second_level[k], xx, atol=1e-14)


def test_concat_cells_round_trip():
    rp = random_lift(5, n=16)
    first = RoughPath(TimeGrid(rp.grid.points[:9]), rp.increments[:8], rp.second_level[:8])
    second = RoughPath(TimeGrid(rp.grid.points[8:]), rp.increments[8:], rp.second_level[8:])
    both = concat_cells(first, second)
    np.testing.assert_array_equal(both.second_level, rp.second_level)


# geometric / Ito ---------------------------------------------------------

def test_piecewise_linear_lift_is_geometric():
    r = check_geometric(random_lift(6, n=1024))
    assert r.passed and r.residual < 1e-14


def test_ito_shift_formula_and_round_trip():
    grid = TimeGrid.uniform(4)
    rp = RoughPath(grid, np.zeros((4, 2)), np.zeros((4, 2, 2)))
    s = ito_to_stratonovich(rp)
    np.testing.assert_allclose(s.second_level[0], 0.125 * np.eye(2))
    back = stratonovich_to_ito(s)
    np.testing.assert_array_equal(back.second_level, rp.second_level)


def test_ito_lift_fails_geometric_and_correction_passes():
    rng = np.random.default_rng(0)
    grid = TimeGrid.uniform(64)
    x = rng.normal(0, 0.125, (64, 1))
    ito = RoughPath(grid, x, 0.5 * (x[:, :, None] ** 2 - grid.steps[:, None, None]))
    r = check_geometric(ito)
    assert not r.passed
    # each cell misses the symmetry identity by exactly dt / 2; longer pairs by more
    assert r.residual >= 0.5 * grid.steps[0] * (1 - 1e-12)
    assert check_geometric(ito_to_stratonovich(ito)).passed


# seminorm ----------------------------------------------------------------

def test_seminorm_linear_path():
    rp = lift_piecewise_linear(np.linspace(0, 1, 17), TimeGrid.uniform(16))
    terms = seminorm_terms(rp, "all")
    assert terms.first == pytest.approx(1.0)
    assert terms.second == pytest.approx(0.5)
    assert rough_seminorm(rp) == pytest.approx(1.5)


def test_seminorm_zero_path():
    assert rough_seminorm(lift_piecewise_linear(np.zeros(9), TimeGrid.uniform(8))) == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_dyadic_is_lower_bound(seed):
    rp = random_lift(seed, n=100)
    assert rough_seminorm(rp, "dyadic") <= rough_seminorm(rp, "all") + 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), lam=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))
def test_seminorm_homogeneous_per_term(seed, lam):
    rp = random_lift(seed, n=40)
    a = seminorm_terms(rp, "all")
    b = seminorm_terms(rp.dilate(lam), "all")
    assert b.first == pytest.approx(abs(lam) * a.first, rel=1e-10)
    assert b.second == pytest.approx(lam * lam * a.second, rel=1e-10)


def test_distance_to_linear_path():
    grid = TimeGrid.uniform(16)
    zero = lift_piecewise_linear(np.zeros(17), grid)
    lin = lift_piecewise_linear(np.linspace(0, 1, 17), grid)
    assert rough_distance(zero, lin) == pytest.approx(1.5)
    assert rough_distance(lin, lin) == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 30))
def test_distance_is_pseudometric(seed):
    a, b, c = (random_lift(seed + k, n=48) for k in range(3))
    ab, bc, ac = rough_distance(a, b), rough_distance(b, c), rough_distance(a, c)
    assert ab == pytest.approx(rough_distance(b, a), rel=1e-12)
    assert ac <= ab + bc + 1e-12


def test_distance_needs_common_grid():
    a = random_lift(0, n=16)
    b = lift_piecewise_linear(np.zeros((18, 2)), TimeGrid.uniform(17))
    with pytest.raises(GridMismatchError):
        rough_distance(a, b)


def test_distance_terms_and_sup_distance():
    a, b = random_lift(8, n=32), random_lift(9, n=32)
    t = distance_terms(a, b, "all")
    assert t.total == pytest.approx(rough_distance(a, b, "all"))
    sup = sup_distance(a, b)
    diff = a.values() - b.values()
    assert sup == pytest.approx(np.sqrt((diff ** 2).sum(-1)).max())


# batches -----------------------------------------------------------------

def test_batched_path_indexing():
    rng = np.random.default_rng(1)
    s = np.cumsum(rng.normal(size=(3, 9, 2)), axis=1)
    rp = lift_piecewise_linear(s, TimeGrid.uniform(8))
    assert rp.batch_shape == (3,)
    single = rp[1]
    np.testing.assert_allclose(single.values(s[1, 0]), s[1])


def test_rough_path_is_immutable():
    rp = random_lift(0, n=8)
    with pytest.raises(ValueError):
        rp.increments[0, 0] = 1.0


# controlled paths --------------------------------------------------------

def test_controlled_path_remainder_vanishes_for_linear_function_of_driver():
    rp = random_lift(10, n=32, d=1)
    x = rp.values()
    cp = ControlledPath(rp.grid, 3.0 * x, np.full((33, 1, 1), 3.0))
    assert cp.remainder_seminorm(rp) < 1e-12


# columnar format ---------------------------------------------------------

def test_columnar_round_trip_exact(tmp_path):
    rp = random_lift(11, n=20)
    path = tmp_path / "p.txt"
    write_columnar(rp, str(path))
    back = read_columnar(str(path))
    np.testing.assert_array_equal(back.increments, rp.increments)
    np.testing.assert_array_equal(back.second_level, rp.second_level)
    np.testing.assert_array_equal(back.grid.points, rp.grid.points)


def test_columnar_rejects_other_text():
    with pytest.raises(RoughPathError):
        read_columnar(io.StringIO("hello\n"))
