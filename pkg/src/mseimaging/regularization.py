"""Berhu source sparsification and bound-constrained TV model regularization."""
from dataclasses import dataclass
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BerhuParams:
    """Berhu transition point ``epsilon`` and prox step ``alpha``."""

    epsilon: float
    alpha: float

    def __post_init__(self):
        if not (self.epsilon > 0 and self.alpha > 0):
            raise ValueError("Berhu epsilon and alpha must be positive")


def berhu_value(x, eps):
    """Reverse Huber: |x| below eps, (x^2 + eps^2) / (2 eps) above."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    ax = np.abs(x)
    return np.where(ax <= eps, ax, (ax * ax + eps * eps) / (2 * eps))


def berhu_prox(x, params):
    """Proximity operator of ``alpha * Berhu_eps``, elementwise.

    Soft threshold up to ``|x| = alpha + eps``, linear shrink by
    ``eps / (alpha + eps)`` beyond. Complex entries keep their phase.
    """
    a, e = params.alpha, params.epsilon
    x = np.asarray(x)
    ax = np.abs(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        soft = np.where(ax > a, 1.0 - a / ax, 0.0)
    scale = np.where(ax <= a + e, soft, e / (a + e))
    return scale * x


# --- total variation -----------------------------------------------------------

def gradient_operator(shape):
    """Forward differences (x then z blocks) with replicate-edge boundaries.

    Returns a sparse (2N, N) matrix; the last column/row differences vanish.
    """
    nz, nx = shape

    def diff(n):
        d = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n), format="lil")
        d[n - 1, n - 1] = 0.0
        return d.tocsr()

    dx = sp.kron(sp.identity(nz), diff(nx), format="csr")
    dz = sp.kron(diff(nz), sp.identity(nx), format="csr")
    return sp.vstack([dx, dz], format="csr")


def tv_value(m, shape):
    """Isotropic TV: sum over cells of the gradient magnitude."""
    m = np.asarray(m, dtype=float).reshape(shape)
    gx = np.zeros_like(m)
    gz = np.zeros_like(m)
    gx[:, :-1] = m[:, 1:] - m[:, :-1]
    gz[:-1, :] = m[1:, :] - m[:-1, :]
    return float(np.sum(np.sqrt(gx * gx + gz * gz)))


def _shrink_iso(v, t, n):
    vx, vz = v[:n], v[n:]
    mag = np.sqrt(vx * vx + vz * vz)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(mag > t, 1.0 - t / mag, 0.0)
    return np.concatenate([f * vx, f * vz])


@dataclass
class TVSubproblem:
    """``tv_weight * TV(m) + lam * (m^T Diag(H) m - 2 g^T m)`` over the box.

    ``H`` is the diagonal of the Gauss-Newton matrix stored as a vector and
    ``g`` the matching linear term, so that without TV and bounds the
    minimizer is ``g / H``.
    """

    H: np.ndarray
    g: np.ndarray
    lam: float
    m_min: np.ndarray
    m_max: np.ndarray
    shape: tuple
    tv_weight: float = 1.0
    m0: np.ndarray = None

    def __post_init__(self):
        n = int(np.prod(self.shape))
        self.H = np.asarray(self.H, dtype=float).ravel()
        self.g = np.asarray(self.g, dtype=float).ravel()
        self.m_min = np.broadcast_to(np.asarray(self.m_min, dtype=float), (n,))
        self.m_max = np.broadcast_to(np.asarray(self.m_max, dtype=float), (n,))
        if self.H.size != n or self.g.size != n:
            raise ValueError("H and g must match the grid size")
        if not (np.all(np.isfinite(self.H)) and np.all(np.isfinite(self.g))):
            raise ValueError("non-finite entries in H or g")
        if np.any(self.H < 0):
            raise ValueError("H must be nonnegative")
        if self.tv_weight < 0 or not self.lam > 0:
            raise ValueError("tv_weight must be nonnegative and lam positive")

    def objective(self, m):
        m = np.asarray(m, dtype=float)
        smooth = self.lam * (m @ (self.H * m) - 2 * self.g @ m)
        return self.tv_weight * tv_value(m, self.shape) + smooth


@dataclass
class TVSolution:
    m: np.ndarray
    converged: bool
    iterations: int
    primal_residual: float
    dual_residual: float


def solve_tv_quadratic(sub, max_iter=200, tol=1e-5, rho=None):
    """Bound-constrained TV-regularized quadratic by split-Bregman ADMM.

    Splits ``z = D m`` (gradient) and ``w = m`` (box). The m-step is a sparse
    SPD solve, the z-step an isotropic shrinkage and the w-step a clip.
    The penalty is rebalanced when primal and dual residuals drift apart.
    The returned model is the box-feasible split variable ``w``.
    """
    n = sub.H.size
    lo, hi = sub.m_min, sub.m_max
    Q = 2.0 * sub.lam * sub.H
    b = 2.0 * sub.lam * sub.g

    if sub.tv_weight == 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.where(Q > 0, b / Q, np.nan)
        fallback = sub.m0 if sub.m0 is not None else np.clip(np.zeros(n), lo, hi)
        m = np.where(np.isnan(m), fallback, m)
        return TVSolution(np.clip(m, lo, hi), True, 0, 0.0, 0.0)

    D = gradient_operator(sub.shape)
    DtD = (D.T @ D).tocsc()
    eye = sp.identity(n, format="csc")
    if rho is None:
        qpos = Q[Q > 0]
        rho = float(np.mean(qpos)) if qpos.size else 1.0
    tau = sub.tv_weight

    m = np.clip(np.zeros(n) if sub.m0 is None else np.asarray(sub.m0, dtype=float), lo, hi)
    z = D @ m
    w = m.copy()
    y = np.zeros(2 * n)
    v = np.zeros(n)

    def factor(r):
        return spl.splu((sp.diags(Q) + r * (DtD + eye)).tocsc()).solve

    solve = factor(rho)
    r_norm = s_norm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        m = solve(b + rho * (D.T @ (z - y)) + rho * (w - v))
        Dm = D @ m
        z_old, w_old = z, w
        z = _shrink_iso(Dm + y, tau / rho, n)
        w = np.clip(m + v, lo, hi)
        y = y + Dm - z
        v = v + m - w

        r_norm = np.sqrt(np.sum((Dm - z) ** 2) + np.sum((m - w) ** 2))
        s_norm = rho * np.linalg.norm(D.T @ (z - z_old) + (w - w_old))
        eps_pri = tol * max(np.sqrt(Dm @ Dm + m @ m), np.sqrt(z @ z + w @ w), 1e-300)
        eps_dual = tol * max(rho * np.linalg.norm(D.T @ y + v), 1e-300)
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break
        if r_norm > 10 * s_norm:
            rho *= 2.0
            y /= 2.0
            v /= 2.0
            solve = factor(rho)
        elif s_norm > 10 * r_norm:
            rho /= 2.0
            y *= 2.0
            v *= 2.0
            solve = factor(rho)
    if not converged:
        log.info("TV solve stopped after %d iterations (primal %.2e, dual %.2e)", it, r_norm, s_norm)
    return TVSolution(w, converged, it, float(r_norm), float(s_norm))
