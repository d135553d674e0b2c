"""Least-squares solvers for the data-assimilated wavefield systems.

Both systems are solved through their normal equations

    (lam A^H A + gamma P^T P) u = sqrt(lam) A^H r_top + sqrt(gamma) P^T r_bot

with a sparse symmetric-mode LU of the Hermitian positive definite matrix, or
Jacobi-preconditioned conjugate gradients as a fallback. The bordered system
carrying the event signatures is reduced to the same matrix plus a rank-p
correction (the location columns are orthonormal), so one factorization per
(frequency, model) serves every system in an outer iteration.
"""
from dataclasses import dataclass
import logging
import threading

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spl

log = logging.getLogger(__name__)

NORMAL_RTOL = 1e-8
BACKSOLVE_RTOL = 1e-10


class SolverError(RuntimeError):
    """Base class for linear solver failures."""


class NotHermitianPositiveDefinite(SolverError):
    pass


class FactorizationError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


class SingularBlockError(SolverError):
    """Signature block of the bordered system is (numerically) singular."""


def _as_matrix(op):
    return op.matrix if hasattr(op, "matrix") and sp.issparse(op.matrix) else sp.csr_matrix(op)


def _sampling_matrix(sampling, n):
    if hasattr(sampling, "matrix") and callable(sampling.matrix):
        return sampling.matrix()
    if sp.issparse(sampling):
        return sampling.tocsr()
    return sp.csr_matrix(np.asarray(sampling))


def normal_matrix(A, P, lam, gamma):
    """``lam A^H A + gamma P^T P`` as a CSC matrix."""
    A = _as_matrix(A)
    Pm = _sampling_matrix(P, A.shape[1])
    N = lam * (A.conj().T @ A) + gamma * (Pm.T @ Pm)
    return sp.csc_matrix(N)


# --- factorization -------------------------------------------------------------

class Factorization:
    """Reusable factorization of a Hermitian positive definite sparse matrix."""

    def __init__(self, matrix, lu):
        self.matrix = matrix
        self._lu = lu

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, rhs):
        return self._lu.solve(np.asarray(rhs, dtype=complex))


def factorize(matrix, check_hermitian=True):
    """Factor an HPD sparse matrix.

    SuperLU runs in symmetric mode without pivoting, which reduces to an
    LDL^H elimination; every pivot of an HPD matrix is then real and positive.

    Raises
    ------
    NotHermitianPositiveDefinite
        If the matrix is not Hermitian or a nonpositive pivot appears.
    FactorizationError
        If SuperLU fails (e.g. exactly singular).
    """
    N = sp.csc_matrix(matrix, dtype=complex)
    if N.shape[0] != N.shape[1]:
        raise NotHermitianPositiveDefinite(f"matrix is not square: {N.shape}")
    scale = abs(N).max() if N.nnz else 0.0
    if check_hermitian and N.nnz:
        asym = abs(N - N.conj().T).max()
        if asym > 1e-12 * scale:
            raise NotHermitianPositiveDefinite(f"matrix is not Hermitian (defect {asym:.3e})")
    try:
        lu = spl.splu(
            N,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:
        raise FactorizationError(f"sparse factorization failed: {exc}") from exc
    pivots = lu.U.diagonal()
    bad = np.flatnonzero((pivots.real <= 0) | (np.abs(pivots.imag) > 1e-8 * np.abs(pivots)))
    if bad.size:
        k = bad[0]
        raise NotHermitianPositiveDefinite(
            f"{bad.size} non-positive pivots; first at elimination step {k}: {pivots[k]:.3e}"
        )
    return Factorization(N, lu)


def backsolve(handle, rhs):
    return handle.solve(rhs)


def jacobi_pcg(matvec, diag, rhs, rtol=NORMAL_RTOL, maxiter=None, x0=None):
    """Conjugate gradients with a diagonal preconditioner for HPD systems."""
    n = rhs.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    op = spl.LinearOperator((n, n), matvec=matvec, dtype=complex)
    prec = spl.LinearOperator((n, n), matvec=lambda r: r / diag, dtype=complex)
    x, info = spl.cg(op, rhs, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, M=prec)
    if info != 0:
        raise ConvergenceError(f"PCG did not reach rtol={rtol} in {maxiter} iterations")
    return x


class FactorCache:
    """Normal-matrix factorizations keyed by (frequency, model version, penalties)."""

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()

    def get(self, key, build):
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        value = build()
        with self._lock:
            self._store[key] = value
        return value

    def invalidate(self, keep_version=None):
        """Drop every entry whose model version differs from ``keep_version``."""
        with self._lock:
            self._store = {k: v for k, v in self._store.items() if k[1] == keep_version}

    def __len__(self):
        return len(self._store)


# --- stacked and bordered systems ----------------------------------------------

@dataclass
class StackedSystem:
    """``[sqrt(lam) A; sqrt(gamma) P] u = [rhs_top; rhs_bottom]``."""

    A: object
    P: object
    lam: float
    gamma: float
    rhs_top: np.ndarray
    rhs_bottom: np.ndarray

    def __post_init__(self):
        if not (self.lam > 0 and self.gamma > 0):
            raise ValueError("penalties must be positive")
        self.rhs_top = np.asarray(self.rhs_top, dtype=complex)
        self.rhs_bottom = np.asarray(self.rhs_bottom, dtype=complex)
        n = _as_matrix(self.A).shape[0]
        if self.rhs_top.shape != (n,):
            raise ValueError(f"rhs_top has shape {self.rhs_top.shape}, expected ({n},)")
        nr = _sampling_matrix(self.P, n).shape[0]
        if self.rhs_bottom.shape != (nr,):
            raise ValueError(f"rhs_bottom has shape {self.rhs_bottom.shape}, expected ({nr},)")

    @property
    def matrix(self):
        return _as_matrix(self.A)

    def normal_rhs(self):
        Pm = _sampling_matrix(self.P, self.matrix.shape[1])
        return np.sqrt(self.lam) * (self.matrix.conj().T @ self.rhs_top) + np.sqrt(self.gamma) * (
            Pm.T @ self.rhs_bottom
        )

    def normal_matrix(self):
        return normal_matrix(self.A, self.P, self.lam, self.gamma)


@dataclass
class AugmentedSystem:
    """Stacked system bordered by the event columns ``-sqrt(lam) Phi``."""

    stacked: StackedSystem
    locations: tuple

    def __post_init__(self):
        loc = tuple(int(k) for k in self.locations)
        if not loc:
            raise ValueError("at least one event location is required")
        self.locations = loc


def normal_residual(N, u, rhs):
    r = N @ u - rhs
    denom = np.linalg.norm(rhs)
    return np.linalg.norm(r) / denom if denom > 0 else np.linalg.norm(r)


def _refine(N, solve, rhs, u, tol, max_steps=3):
    res = normal_residual(N, u, rhs)
    steps = 0
    while res > tol and steps < max_steps:
        u = u + solve(rhs - N @ u)
        res = normal_residual(N, u, rhs)
        steps += 1
    return u, res


def solve_stacked(sys, factor=None, method="direct", rtol=NORMAL_RTOL):
    """Least-squares solution of a :class:`StackedSystem`.

    Parameters
    ----------
    factor : Factorization, optional
        Precomputed factorization of the normal matrix (reused across rhs).
    method : {"direct", "iterative"}
        Ignored when ``factor`` is given. "direct" falls back to PCG if the
        sparse factorization fails for reasons other than definiteness.
    """
    rhs = sys.normal_rhs()
    if not np.any(rhs):
        return np.zeros(rhs.shape[0], dtype=complex)
    N = factor.matrix if factor is not None else sys.normal_matrix()
    if factor is None and method == "direct":
        try:
            factor = factorize(N)
        except FactorizationError as exc:
            log.warning("direct factorization failed (%s); falling back to PCG", exc)
    if factor is not None:
        u, res = _refine(N, factor.solve, rhs, factor.solve(rhs), rtol)
    else:
        u = jacobi_pcg(lambda x: N @ x, N.diagonal().real, rhs, rtol=rtol * 0.5)
        res = normal_residual(N, u, rhs)
    if res > rtol:
        raise ConvergenceError(f"normal-equation residual {res:.3e} exceeds {rtol:.1e}")
    return u


def solve_augmented(sys, factor=None, rtol=NORMAL_RTOL, max_condition=1e12):
    """Least-squares solution ``(u, s)`` of an :class:`AugmentedSystem`.

    The signature unknowns are eliminated explicitly: for fixed u the optimum
    is ``s = Phi^T (A u - r_top / sqrt(lam))``, leaving the normal matrix
    ``N - lam V^H V`` with ``V = Phi^T A``. That matrix is inverted through the
    Woodbury identity on the (cached) factorization of N, at the cost of p
    extra backsolves.
    """
    st = sys.stacked
    loc = np.asarray(sys.locations)
    if np.unique(loc).size != loc.size:
        raise SingularBlockError("duplicate event locations make the signature block singular")
    A = st.matrix
    n = A.shape[1]
    if loc.min() < 0 or loc.max() >= n:
        raise ValueError("event location out of range")
    if factor is None:
        factor = factorize(st.normal_matrix())
    N = factor.matrix
    lam = st.lam
    c = st.rhs_top / np.sqrt(lam)
    Pm = _sampling_matrix(st.P, n)
    c_perp = c.copy()
    c_perp[loc] = 0.0
    rhs = lam * (A.conj().T @ c_perp) + np.sqrt(st.gamma) * (Pm.T @ st.rhs_bottom)

    V = A[loc, :]                                     # p x n sparse rows
    NinvVh = factor.solve(V.conj().T.toarray())       # n x p
    if NinvVh.ndim == 1:
        NinvVh = NinvVh[:, None]
    cap = np.eye(loc.size) - lam * (V @ NinvVh)
    cond = np.linalg.cond(cap)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularBlockError(f"signature block is singular (condition {cond:.2e})")
    cap_lu = la.lu_factor(cap)

    def solve_reduced(r):
        y = factor.solve(r)
        return y + lam * NinvVh @ la.lu_solve(cap_lu, V @ y)

    def apply_reduced(x):
        return N @ x - lam * (V.conj().T @ (V @ x))

    u = solve_reduced(rhs)
    res = _reduced_residual(apply_reduced, u, rhs)
    steps = 0
    while res > rtol and steps < 3:
        u = u + solve_reduced(rhs - apply_reduced(u))
        res = _reduced_residual(apply_reduced, u, rhs)
        steps += 1
    s = (A @ u)[loc] - c[loc]
    full = augmented_normal_residual(sys, u, s)
    if full > rtol:
        raise ConvergenceError(f"bordered normal-equation residual {full:.3e} exceeds {rtol:.1e}")
    return u, s


def _reduced_residual(apply_op, u, rhs):
    denom = np.linalg.norm(rhs)
    r = np.linalg.norm(apply_op(u) - rhs)
    return r / denom if denom > 0 else r


def augmented_normal_residual(sys, u, s):
    """Relative residual of the full bordered normal equations in (u, s)."""
    st = sys.stacked
    A = st.matrix
    n = A.shape[1]
    loc = np.asarray(sys.locations)
    lam, gamma = st.lam, st.gamma
    Pm = _sampling_matrix(st.P, n)
    phis = np.zeros(n, dtype=complex)
    phis[loc] = s
    top = A @ u - phis
    r_u = lam * (A.conj().T @ top) + gamma * (Pm.T @ (Pm @ u))
    r_s = -lam * top[loc]
    b_u = np.sqrt(lam) * (A.conj().T @ st.rhs_top) + np.sqrt(gamma) * (Pm.T @ st.rhs_bottom)
    b_s = -np.sqrt(lam) * st.rhs_top[loc]
    num = np.sqrt(np.linalg.norm(r_u - b_u) ** 2 + np.linalg.norm(r_s - b_s) ** 2)
    den = np.sqrt(np.linalg.norm(b_u) ** 2 + np.linalg.norm(b_s) ** 2)
    return num / den if den > 0 else num
