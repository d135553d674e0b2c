import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.optimize import lsq_linear, minimize_scalar

from mseimaging.regularization import (
    BerhuParams,
    TVSubproblem,
    berhu_prox,
    berhu_value,
    gradient_operator,
    solve_tv_quadratic,
    tv_value,
)


# --- Berhu ----------------------------------------------------------------------

def test_berhu_value_examples():
    assert berhu_value(0.0, 1.0) == 0.0
    assert berhu_value(0.7, 0.7) == pytest.approx(0.7)
    assert berhu_value(3.0, 1.0) == 5.0
    assert berhu_value(-3.0, 1.0) == 5.0
    with pytest.raises(ValueError):
        berhu_value(1.0, 0.0)


def test_berhu_value_convex_and_continuous():
    eps = 0.8
    x = np.linspace(-5, 5, 2001)
    b = berhu_value(x, eps)
    assert np.all(b[:-2] + b[2:] - 2 * b[1:-1] >= -1e-12)
    assert berhu_value(eps * (1 + 1e-12), eps) == pytest.approx(berhu_value(eps, eps), abs=1e-10)


def test_berhu_prox_examples():
    p = BerhuParams(1.0, 1.0)
    assert berhu_prox(0.0, p) == 0.0
    assert berhu_prox(0.5, p) == 0.0
    assert berhu_prox(4.0, p) == pytest.approx(2.0)
    z = berhu_prox(np.array([3 + 4j]), p)[0]
    assert np.angle(z) == pytest.approx(np.angle(3 + 4j))
    with pytest.raises(ValueError):
        BerhuParams(0.0, 1.0)


def _brute_prox(x, alpha, eps):
    f = lambda z: alpha * float(berhu_value(z, eps)) + 0.5 * (z - x) ** 2
    lo, hi = min(0.0, x) - 1.0, max(0.0, x) + 1.0
    grid = np.linspace(lo, hi, 4001)
    vals = alpha * berhu_value(grid, eps) + 0.5 * (grid - x) ** 2
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    return minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-12}).x


def test_berhu_prox_matches_brute_force_sweep():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        x = rng.uniform(-10, 10)
        alpha = rng.uniform(0.05, 3)
        eps = rng.uniform(0.05, 3)
        got = float(berhu_prox(x, BerhuParams(eps, alpha)))
        worst = max(worst, abs(got - _brute_prox(x, alpha, eps)))
    assert worst < 1e-6


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
    st.floats(0.01, 10), st.floats(0.01, 10),
)
def test_berhu_prox_nonexpansive(xr, xi, yr, yi, alpha, eps):
    p = BerhuParams(eps, alpha)
    x, y = np.array([xr + 1j * xi]), np.array([yr + 1j * yi])
    assert abs(berhu_prox(x, p) - berhu_prox(y, p))[0] <= abs(x - y)[0] * (1 + 1e-12) + 1e-12


def test_berhu_prox_continuous_at_seams():
    p = BerhuParams(0.6, 1.3)
    for seam in (p.alpha, p.alpha + p.epsilon):
        left = berhu_prox(seam * (1 - 1e-10), p)
        right = berhu_prox(seam * (1 + 1e-10), p)
        assert abs(left - right) < 1e-8


# --- TV -------------------------------------------------------------------------------

def naive_tv(m):
    nz, nx = m.shape
    total = 0.0
    for i in range(nz):
        for j in range(nx):
            gx = m[i, j + 1] - m[i, j] if j + 1 < nx else 0.0
            gz = m[i + 1, j] - m[i, j] if i + 1 < nz else 0.0
            total += np.sqrt(gx * gx + gz * gz)
    return total


def test_tv_value_examples():
    assert tv_value(np.full(12, 3.0), (3, 4)) == 0.0
    nz, nx = 5, 7
    m = np.zeros((nz, nx))
    m[:, 4:] = 1.0
    assert tv_value(m, (nz, nx)) == pytest.approx(nz)
    r = np.random.default_rng(1).standard_normal((5, 5))
    assert abs(tv_value(r, (5, 5)) - naive_tv(r)) < 1e-12
    assert tv_value(r + 17.0, (5, 5)) == pytest.approx(tv_value(r, (5, 5)), abs=1e-12)


def test_gradient_operator_matches_tv():
    r = np.random.default_rng(2).standard_normal((4, 6))
    D = gradient_operator(r.shape)
    gx, gz = np.split(D @ r.ravel(), 2)
    assert np.sum(np.hypot(gx, gz)) == pytest.approx(tv_value(r, r.shape), abs=1e-12)


def test_tv_quadratic_unconstrained_closed_form():
    rng = np.random.default_rng(3)
    H = rng.uniform(0.5, 2, 20)
    g = rng.standard_normal(20)
    sol = solve_tv_quadratic(TVSubproblem(H, g, 2.0, -np.inf, np.inf, (4, 5), tv_weight=0.0))
    assert np.allclose(sol.m, g / H, rtol=0, atol=1e-15)


def test_tv_quadratic_bounds_active_projection():
    rng = np.random.default_rng(4)
    H = rng.uniform(0.5, 2, 20)
    g = rng.standard_normal(20)
    lo, hi = -0.1, 0.1
    sol = solve_tv_quadratic(TVSubproblem(H, g, 1.0, lo, hi, (4, 5), tv_weight=0.0))
    assert np.array_equal(sol.m, np.clip(g / H, lo, hi))


def taut_string(y, tau):
    """Exact 1-D TV denoising ``argmin 1/2 |x - y|^2 + tau TV(x)`` via the tube problem.

    The cumulative sum F of the solution is the shortest path through the tube
    ``|F_k - S_k| <= tau`` with fixed ends, i.e. the bounded least-squares
    minimizer of the squared increments.
    """
    n = len(y)
    S = np.concatenate([[0.0], np.cumsum(y)])
    D = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n, n - 1)).toarray()
    c = np.zeros(n)
    c[-1] = S[n]
    res = lsq_linear(D, -c, bounds=(S[1:n] - tau, S[1:n] + tau), method="bvls", tol=1e-14)
    F = np.concatenate([[0.0], res.x, [S[n]]])
    return np.diff(F)


@pytest.mark.parametrize("seed,weight", [(1, 0.6), (2, 0.3), (3, 1.5)])
def test_tv_quadratic_matches_taut_string(seed, weight):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(30), np.ones(30), 0.4 * np.ones(20)] + 0.1 * rng.standard_normal(80)
    lam = 1.0
    ref = taut_string(y, weight / (2 * lam))
    sol = solve_tv_quadratic(
        TVSubproblem(np.ones(y.size), y, lam, -np.inf, np.inf, (y.size, 1), weight),
        max_iter=5000, tol=1e-10,
    )
    assert sol.converged
    assert np.max(np.abs(sol.m - ref)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_tv_quadratic_respects_bounds(seed, weight):
    rng = np.random.default_rng(seed)
    H = rng.uniform(0, 2, 12)
    g = rng.standard_normal(12)
    lo, hi = rng.uniform(-1, 0, 12), rng.uniform(0, 1, 12)
    sol = solve_tv_quadratic(TVSubproblem(H, g, 1.0, lo, hi, (3, 4), weight), max_iter=50)
    assert np.all(sol.m >= lo) and np.all(sol.m <= hi)


def test_tv_quadratic_not_worse_than_start():
    rng = np.random.default_rng(5)
    shape = (8, 9)
    n = 72
    H = rng.uniform(0.2, 1.0, n)
    g = H * (np.kron(np.r_[np.zeros(4), np.ones(4)], np.ones(9))[:n] + 0.2 * rng.standard_normal(n))
    sub = TVSubproblem(H, g, 1.0, -np.inf, np.inf, shape, 0.5)
    sol = solve_tv_quadratic(sub, max_iter=2000, tol=1e-8)
    assert sub.objective(sol.m) <= sub.objective(g / H)
    assert sub.objective(sol.m) <= sub.objective(np.full(n, np.mean(g / H)))


def test_tv_subproblem_validation():
    with pytest.raises(ValueError):
        TVSubproblem(np.ones(4), np.ones(3), 1.0, 0, 1, (2, 2))
    with pytest.raises(ValueError):
        TVSubproblem(-np.ones(4), np.ones(4), 1.0, 0, 1, (2, 2))
    with pytest.raises(ValueError):
        TVSubproblem(np.ones(4), np.ones(4), 0.0, 0, 1, (2, 2))
