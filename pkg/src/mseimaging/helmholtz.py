"""Discrete Helmholtz operator A(m, w) = Lap + w^2 Diag(m) with PML sides/bottom.

Time convention is ``exp(+i w t)`` for synthesis, so outgoing waves behave as
``exp(-i k r)`` and the absorbing layer stretches coordinates by
``s = 1 - i sigma / w``.

The free surface is a homogeneous Dirichlet row one cell above interior row 0.
That row is eliminated from the system: it never carries an unknown, so the
field there is zero by construction and the operator keeps the form
``Lap + w^2 Diag(m)`` on every row.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_REFLECTION = 1e-3


def pml_damping(n, lo, hi, h, sigma_max, width):
    """Quadratic damping profile at cell centres and half points.

    ``lo`` cells at the start and ``hi`` cells at the end of the axis are
    absorbing. Returns ``(centres, halves)``; ``halves[k]`` sits between cell
    ``k - 1`` and ``k`` (length n + 1).
    """
    def profile(pos):
        d = np.zeros_like(pos)
        if lo:
            d = np.maximum(d, lo - pos)
        if hi:
            d = np.maximum(d, pos - (n - 1 - hi))
        d = np.clip(d, 0.0, None)
        return sigma_max * (d / max(width, 1)) ** 2

    centres = profile(np.arange(n, dtype=float))
    halves = profile(np.arange(n + 1, dtype=float) - 0.5)
    return centres, halves


def second_difference(n, h, omega, lo=0, hi=0, sigma_max=0.0, width=0):
    """1-D stretched second difference with Dirichlet ends.

    Row k reads ``(1/s_k) [(u_{k+1}-u_k)/s_{k+1/2} - (u_k-u_{k-1})/s_{k-1/2}] / h^2``.
    """
    sc, sh = pml_damping(n, lo, hi, h, sigma_max, width)
    s = 1.0 - 1j * sc / omega
    s_half = 1.0 - 1j * sh / omega
    left = 1.0 / (s * s_half[:-1])
    right = 1.0 / (s * s_half[1:])
    diag = -(left + right)
    return sp.diags([left[1:], diag, right[:-1]], [-1, 0, 1], format="csr") / h**2


def pml_sigma_max(v_ref, width_m, reflection=DEFAULT_REFLECTION):
    if width_m <= 0:
        return 0.0
    return 1.5 * v_ref * np.log(1.0 / reflection) / width_m


@dataclass(frozen=True, eq=False)
class HelmholtzOperator:
    grid: object
    omega: float
    matrix: sp.csr_matrix
    m_snapshot: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, u):
        return apply(self, u)


def assemble(model, omega, pml_velocity=None, reflection=DEFAULT_REFLECTION):
    """Assemble A(m, omega) on the padded grid.

    Parameters
    ----------
    model : Model
        Interior squared slowness; extended into the PML by edge replication.
    omega : float
        Angular frequency in rad/s.
    pml_velocity : float, optional
        Reference velocity for the damping strength. Defaults to the model's
        maximum velocity; pass a fixed value to keep the layer independent of
        model updates.
    """
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    m = np.asarray(model.m)
    if not np.all(np.isfinite(m)):
        raise ValueError("model contains non-finite values")
    g = model.grid
    w = g.pml_width
    v_ref = float(np.max(1.0 / np.sqrt(m))) if pml_velocity is None else float(pml_velocity)
    sigma_max = pml_sigma_max(v_ref, w * g.h, reflection)

    lz = second_difference(g.nz_pad, g.h, omega, 0, w, sigma_max, w)
    lx = second_difference(g.nx_pad, g.h, omega, w, w, sigma_max, w)
    lap = sp.kron(lz, sp.identity(g.nx_pad), format="csr") + sp.kron(
        sp.identity(g.nz_pad), lx, format="csr"
    )
    m_pad = g.pad(m)
    matrix = (lap + sp.diags(omega**2 * m_pad.astype(complex))).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    snapshot = m.copy()
    snapshot.flags.writeable = False
    return HelmholtzOperator(g, float(omega), matrix, snapshot)


def _check_length(op, x):
    x = np.asarray(x)
    if x.shape != (op.shape[1],):
        raise ValueError(f"field of shape {x.shape} does not match operator size {op.shape[1]}")
    return x


def apply(op, u):
    return op.matrix @ _check_length(op, u)


def apply_adjoint(op, v):
    return op.matrix.conj().T @ _check_length(op, v)


def jacobian_action(model, omega, u):
    """Diagonal of dA/dm applied to u, on interior cells: ``omega^2 u_int``.

    Since A depends on m only through ``omega^2 Diag(m)``, the map
    ``dm -> (dA/dm dm) u`` is ``omega^2 Diag(u) dm``. PML rows are excluded.
    """
    g = model.grid
    u = np.asarray(u)
    if u.shape != (g.n_pad,):
        raise ValueError(f"wavefield of shape {u.shape} does not match grid size {g.n_pad}")
    return omega**2 * g.restrict(u)


@dataclass(frozen=True)
class SamplingOperator:
    """Receiver restriction P (Nr x N_pad) stored as an index list."""

    receivers: tuple
    n_pad: int

    def __post_init__(self):
        rec = np.asarray(self.receivers, dtype=int)
        if rec.size and (rec.min() < 0 or rec.max() >= self.n_pad):
            raise ValueError("receiver index out of range")
        object.__setattr__(self, "receivers", tuple(int(r) for r in rec))

    @classmethod
    def from_acquisition(cls, acquisition):
        return cls(acquisition.receivers, acquisition.grid.n_pad)

    @property
    def index(self):
        return np.asarray(self.receivers, dtype=int)

    @property
    def n_receivers(self):
        return len(self.receivers)

    def apply(self, u):
        u = np.asarray(u)
        if u.shape[0] != self.n_pad:
            raise ValueError("field length does not match sampling operator")
        return u[self.index]

    def adjoint(self, d):
        d = np.asarray(d)
        if d.shape[0] != self.n_receivers:
            raise ValueError("data length does not match receiver count")
        out = np.zeros((self.n_pad,) + d.shape[1:], dtype=np.result_type(d, float))
        out[self.index] = d
        return out

    def matrix(self):
        nr = self.n_receivers
        return sp.csr_matrix((np.ones(nr), (np.arange(nr), self.index)), shape=(nr, self.n_pad))
