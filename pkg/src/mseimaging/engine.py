"""ADMM wavefield-reconstruction inversion for point-source location.

One outer iteration runs the source-location loop (mean source by a Berhu
prox, then data-assimilated wavefields driven by that source), picks events
on the mean-source image, jointly refines wavefields and event signatures,
optionally updates the squared slowness under TV and box constraints and
finally takes a dual ascent step on both constraint blocks.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spl
from scipy import ndimage

from .grid import interior_flat_index, interior_position
from .helmholtz import SamplingOperator, assemble
from .regularization import BerhuParams, TVSubproblem, berhu_prox, solve_tv_quadratic
from .solvers import (
    AugmentedSystem,
    FactorCache,
    SingularBlockError,
    StackedSystem,
    factorize,
    normal_matrix,
    solve_augmented,
    solve_stacked,
)

log = logging.getLogger(__name__)

SOURCE_STACKS = ("aligned", "coherent")
SOURCE_NORMALIZATIONS = ("resolution", "none")


@dataclass(frozen=True)
class InversionConfig:
    """Penalties, loop counts, picker and regularization settings.

    ``lam`` and ``gamma`` default to ``1 / mean(w^4)`` and
    ``gamma_ratio * lam``. ``peak_min_distance`` is in meters and defaults to
    three cells.

    The Berhu prox step is ``source_threshold * max|x|`` where ``x`` is the
    stacked prox argument, unless ``source_weight`` is given, in which case
    it is ``source_weight / (lam q)``. The Berhu transition point is
    ``berhu_epsilon * median|x|``.

    ``source_stack`` selects how the per-frequency source estimates are
    averaged. "coherent" is the plain frequency mean. "aligned" first removes
    a per-cell origin-time phase ``exp(-i w tau)`` chosen to maximize the
    mean's magnitude, so events with arbitrary origin times stack in phase.

    ``source_normalization`` = "resolution" works in the variable
    ``beta = b / sqrt(n)`` where ``n = diag(G^H (G G^H + lam/gamma I)^-1 G)``
    with ``G = P A^-1`` is the resolution diagonal. This removes the
    geometric-spreading bias of the data-assimilated source image; the
    source fed to the wavefield re-solve is ``sqrt(n) beta``.

    ``tv_weight`` is relative: the absolute TV weight is
    ``tv_weight * lam * mean(H) * mean(m)``.
    """

    lam: float = None
    gamma: float = None
    gamma_ratio: float = 1e4
    n_inner: int = 10
    n_outer: int = 5
    update_model: bool = False
    peak_threshold: float = 0.3
    peak_min_distance: float = None
    tv_weight: float = 0.01
    tol_source_change: float = 1e-3
    tol_data_residual: float = 1e-2
    source_stack: str = "aligned"
    source_normalization: str = "resolution"
    source_spectrum: str = "flat"
    inner_momentum: bool = True
    source_threshold: float = 0.2
    source_weight: float = None
    berhu_epsilon: float = 3.0
    receiver_mute: int = 4
    tv_max_iter: int = 200
    tv_tol: float = 1e-5
    solver: str = "direct"
    threads: int = 1
    pml_velocity: float = None

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.gamma_ratio > 0:
            raise ValueError("gamma_ratio must be positive")
        if self.n_inner < 1 or self.n_outer < 1:
            raise ValueError("n_inner and n_outer must be at least 1")
        if not 0 < self.peak_threshold < 1:
            raise ValueError("peak_threshold must lie in (0, 1)")
        if self.peak_min_distance is not None and self.peak_min_distance < 0:
            raise ValueError("peak_min_distance must be nonnegative")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        if self.source_stack not in SOURCE_STACKS:
            raise ValueError(f"source_stack must be one of {SOURCE_STACKS}")
        if self.source_normalization not in SOURCE_NORMALIZATIONS:
            raise ValueError(f"source_normalization must be one of {SOURCE_NORMALIZATIONS}")
        if self.source_spectrum not in ("flat", "projected"):
            raise ValueError("source_spectrum must be 'flat' or 'projected'")
        if not 0 < self.source_threshold < 1:
            raise ValueError("source_threshold must lie in (0, 1)")
        if self.source_weight is not None and not self.source_weight > 0:
            raise ValueError("source_weight must be positive")
        if not self.berhu_epsilon > 0:
            raise ValueError("berhu_epsilon must be positive")
        if self.receiver_mute < 0:
            raise ValueError("receiver_mute must be nonnegative")
        if self.solver not in ("direct", "iterative"):
            raise ValueError("solver must be 'direct' or 'iterative'")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def penalties(self, omegas):
        lam = self.lam if self.lam is not None else 1.0 / float(np.mean(np.asarray(omegas) ** 4))
        gamma = self.gamma if self.gamma is not None else self.gamma_ratio * lam
        return lam, gamma


@dataclass
class EventSet:
    """Event cells (padded flat indices), q x p signatures and pick amplitudes."""

    locations: tuple = ()
    signatures: np.ndarray = None
    confidence: np.ndarray = None

    def __post_init__(self):
        self.locations = tuple(int(k) for k in self.locations)
        if len(set(self.locations)) != len(self.locations):
            raise ValueError("event locations must be distinct")
        p = len(self.locations)
        if self.signatures is None:
            self.signatures = np.zeros((0, p), dtype=complex)
        self.signatures = np.asarray(self.signatures, dtype=complex)
        if self.signatures.ndim != 2 or self.signatures.shape[1] != p:
            raise ValueError("signatures must be a q x p array")
        if not np.all(np.isfinite(self.signatures)):
            raise ValueError("signatures must be finite")
        self.confidence = (
            np.zeros(p) if self.confidence is None else np.asarray(self.confidence, dtype=float)
        )

    @property
    def p(self):
        return len(self.locations)

    def cells(self, grid):
        return [interior_position(k, grid) for k in self.locations]

    def source_vector(self, k, n_pad):
        """``Phi s(w_k)`` on the padded grid."""
        b = np.zeros(n_pad, dtype=complex)
        if self.p and self.signatures.shape[0]:
            b[list(self.locations)] = self.signatures[k]
        return b


@dataclass
class MeanSource:
    """Mean-source image over the padded grid.

    ``values`` is the sparse image used for picking, ``origin_time`` the
    per-cell origin time of the aligned stack and ``sources`` (q x N_pad) the
    per-frequency source fields it implies for the wavefield re-solve.
    """

    values: np.ndarray
    origin_time: np.ndarray
    sources: np.ndarray

    def at(self, k):
        return self.sources[k]


@dataclass
class InversionState:
    model: object
    wavefields: np.ndarray
    mean_source: MeanSource
    events: EventSet
    dual_b: np.ndarray
    dual_d: np.ndarray
    model_version: int = 0
    history: list = field(default_factory=list)


@dataclass
class InversionResult:
    events: EventSet
    model: object
    history: list
    converged: bool
    state: InversionState


class InversionProblem:
    """Fixed inputs of a run plus operator and factorization caches.

    Operators and normal-matrix factors are cached per (frequency, model
    version); a model update bumps the version and drops stale entries.
    """

    def __init__(self, acquisition, data, config, pml_velocity=None):
        self.acquisition = acquisition
        self.grid = acquisition.grid
        self.omegas = acquisition.omegas
        self.data = np.asarray(getattr(data, "values", data), dtype=complex)
        if self.data.shape != (self.omegas.size, acquisition.n_receivers):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"{self.omegas.size} frequencies x {acquisition.n_receivers} receivers"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("data contain non-finite values")
        self.config = config
        self.lam, self.gamma = config.penalties(self.omegas)
        self.P = SamplingOperator.from_acquisition(acquisition)
        self.pml_velocity = pml_velocity if pml_velocity is None else float(pml_velocity)
        self.factors = FactorCache()
        self._ops = {}
        self._resolution = {}
        self.support = self._source_support()

    @property
    def q(self):
        return self.omegas.size

    def _source_support(self):
        """Interior cells allowed to carry source energy (receiver halo muted)."""
        g = self.grid
        mask = g.interior_mask().reshape(g.padded_shape)
        r = self.config.receiver_mute
        if r > 0:
            near = np.zeros(g.padded_shape, dtype=bool)
            for k in self.P.index:
                i, j = divmod(int(k), g.nx_pad)
                near[max(i - r, 0): i + r + 1, max(j - r, 0): j + r + 1] = True
            mask &= ~near
        return mask.ravel()

    def operator(self, k, model, version):
        key = (k, version)
        op = self._ops.get(key)
        if op is None:
            op = assemble(model, self.omegas[k], self.pml_velocity)
            self._ops = {kk: v for kk, v in self._ops.items() if kk[1] == version}
            self._ops[key] = op
        return op

    def factor(self, k, model, version):
        if self.config.solver != "direct":
            return None
        op = self.operator(k, model, version)
        return self.factors.get(
            (k, version, self.lam, self.gamma),
            lambda: factorize(normal_matrix(op.matrix, self.P, self.lam, self.gamma)),
        )

    def resolution(self, model, version):
        """Resolution diagonal on the support cells (q x n_support), cached per version.

        Uses ``Nr`` backsolves with ``A^H`` per frequency and a Cholesky
        factorization of the ``Nr x Nr`` matrix ``G G^H + (lam/gamma) I``.
        """
        hit = self._resolution.get(version)
        if hit is not None:
            return hit
        nr = self.P.n_receivers
        rhs = np.zeros((self.grid.n_pad, nr), dtype=complex)
        rhs[self.P.index, np.arange(nr)] = 1.0
        eps = self.lam / self.gamma

        def one(k):
            op = self.operator(k, model, version)
            gh = spl.splu(op.matrix.conj().T.tocsc()).solve(rhs)   # A^-H P^T
            M = gh.conj().T @ gh + eps * np.eye(nr)
            L = la.cholesky(M, lower=True)
            W = la.solve_triangular(L, gh[self.support].conj().T, lower=True)
            return np.sum(np.abs(W) ** 2, axis=0)

        n = np.array(self.map(one))
        n = np.maximum(n, 1e-12 * n.max(axis=1, keepdims=True))
        self._resolution = {version: n}
        return n

    def set_version(self, version):
        self.factors.invalidate(keep_version=version)
        self._ops = {kk: v for kk, v in self._ops.items() if kk[1] == version}
        self._resolution = {kk: v for kk, v in self._resolution.items() if kk == version}

    def map(self, fn):
        """Evaluate ``fn(k)`` over all frequencies, in order."""
        if self.config.threads > 1 and self.q > 1:
            with ThreadPoolExecutor(self.config.threads) as pool:
                return list(pool.map(fn, range(self.q)))
        return [fn(k) for k in range(self.q)]

    def solve_stacked(self, k, model, version, rhs_top, rhs_bottom):
        op = self.operator(k, model, version)
        sys = StackedSystem(op.matrix, self.P, self.lam, self.gamma, rhs_top, rhs_bottom)
        return solve_stacked(sys, self.factor(k, model, version), method=self.config.solver)


def check_dispersion(model, acquisition, min_points=10):
    """Warn when the grid resolves the shortest wavelength with too few cells."""
    v_min = float(np.min(model.velocity))
    f_max = float(np.max(acquisition.omegas)) / (2 * np.pi)
    ppw = v_min / (f_max * model.grid.h)
    if ppw < min_points:
        log.warning(
            "only %.1f grid points per minimum wavelength (v_min %.0f m/s, f_max %.1f Hz)",
            ppw, v_min, f_max,
        )
    return ppw


def _zero_mean_source(problem):
    n = problem.grid.n_pad
    return MeanSource(np.zeros(n, dtype=complex), np.zeros(n), np.zeros((problem.q, n), dtype=complex))


def initial_state(problem, model0):
    q, n, nr = problem.q, problem.grid.n_pad, problem.acquisition.n_receivers
    return InversionState(
        model=model0,
        wavefields=np.zeros((q, n), dtype=complex),
        mean_source=_zero_mean_source(problem),
        events=EventSet((), np.zeros((q, 0), dtype=complex)),
        dual_b=np.zeros((q, n), dtype=complex),
        dual_d=np.zeros((q, nr), dtype=complex),
    )


def reconstruct_initial_wavefield(problem, model, version=0):
    """Data-assimilated wavefields with a zero wave-equation rhs."""
    n = problem.grid.n_pad
    sq_gamma = np.sqrt(problem.gamma)

    def one(k):
        return problem.solve_stacked(k, model, version, np.zeros(n), sq_gamma * problem.data[k])

    return np.array(problem.map(one))


def reconstruct_wavefield_with_source(problem, state, mean_source):
    """Wavefields driven by the mean source: top rhs ``sqrt(lam) b(w)``, no duals.

    With the model fixed, shifting both blocks by their scaled duals would not
    change the result: every joint update leaves ``A^H mu_b + P^H mu_d = 0``,
    so the shift cancels in the normal equations.
    """
    sq_lam, sq_gamma = np.sqrt(problem.lam), np.sqrt(problem.gamma)

    def one(k):
        b = mean_source.at(k)
        return problem.solve_stacked(
            k, state.model, state.model_version, sq_lam * b, sq_gamma * problem.data[k]
        )

    return np.array(problem.map(one))


def source_residuals(problem, state):
    """Per-frequency prox arguments ``A u + mu_b / lam`` (q x N_pad)."""
    def one(k):
        op = problem.operator(k, state.model, state.model_version)
        return op.matrix @ state.wavefields[k] + state.dual_b[k] / problem.lam

    return np.array(problem.map(one))


def _stack_aligned(X, omegas):
    """Per-cell origin time maximizing ``|mean_k X_k exp(i w_k tau)|``.

    The scan covers one period of the frequency comb, ``2 pi / min(dw)``, on
    a grid fine enough to resolve the highest frequency; the best sample is
    refined by a parabolic fit.
    """
    q = omegas.size
    if q == 1:
        return X[0].copy(), np.zeros(X.shape[1])
    dw = float(np.min(np.diff(omegas)))
    period = 2 * np.pi / dw
    L = max(32, int(np.ceil(16 * omegas[-1] / dw)))
    dtau = period / L
    taus = np.arange(L) * dtau
    E = np.exp(1j * np.outer(taus, omegas)) / q          # L x q
    amp = np.abs(E @ X)                                  # L x n
    best = np.argmax(amp, axis=0)
    cols = np.arange(X.shape[1])
    a = amp[(best - 1) % L, cols]
    b = amp[best, cols]
    c = amp[(best + 1) % L, cols]
    denom = a - 2 * b + c
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(denom < 0, 0.5 * (a - c) / denom, 0.0)
    tau = (best + np.clip(shift, -0.5, 0.5)) * dtau
    z = np.mean(X * np.exp(1j * np.outer(omegas, tau)), axis=0)
    return z, tau


def mean_source_argument(problem, state):
    """Prox argument on the support cells.

    Returns the stacked argument ``z``, the origin times ``tau``, the
    per-frequency estimates ``X`` (q x n_support, normalized when enabled)
    and the factor ``root_n`` mapping normalized values back to source units
    (``None`` without normalization).
    """
    X = source_residuals(problem, state)[:, problem.support]
    root_n = None
    if problem.config.source_normalization == "resolution":
        root_n = np.sqrt(problem.resolution(state.model, state.model_version))
        X = X / root_n
    if problem.config.source_stack == "coherent":
        return X.mean(axis=0), np.zeros(X.shape[1]), X, root_n
    z, tau = _stack_aligned(X, problem.omegas)
    return z, tau, X, root_n


def berhu_parameters(problem, z):
    cfg = problem.config
    az = np.abs(z)
    peak = float(az.max()) if az.size else 0.0
    if peak == 0.0:
        return None
    if cfg.source_weight is not None:
        alpha = cfg.source_weight / (problem.lam * problem.q)
    else:
        alpha = cfg.source_threshold * peak
    eps = cfg.berhu_epsilon * float(np.median(az))
    if not eps > 0:
        eps = 1e-6 * peak
    return BerhuParams(eps, alpha)


def estimate_mean_source(problem, state):
    """Berhu-prox estimate of the frequency-averaged source image.

    With ``source_spectrum = "flat"`` every frequency receives
    ``b_bar exp(-i w tau)``. With "projected" each frequency keeps the part
    of its own estimate in phase with the stack, scaled by the prox shrink
    factor ``|b_bar| / |z|``.
    """
    z, tau, X, root_n = mean_source_argument(problem, state)
    out = _zero_mean_source(problem)
    params = berhu_parameters(problem, z)
    if params is None:
        return out
    bbar = berhu_prox(z, params)
    out.values[problem.support] = bbar
    out.origin_time[problem.support] = tau
    delay = np.exp(-1j * np.outer(problem.omegas, tau))
    if problem.config.source_spectrum == "projected":
        az = np.abs(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(az > 0, np.abs(bbar) / az, 0.0)
            phase = np.where(az > 0, z / az, 1.0)
        src = factor * np.real(X * np.conj(delay) * np.conj(phase)) * phase * delay
    else:
        src = bbar * delay
    if root_n is not None:
        src = src * root_n
    out.sources[:, problem.support] = src
    return out


def inner_location_loop(problem, state):
    """Alternate mean-source estimation and wavefield re-solves ``n_inner`` times.

    With ``inner_momentum`` the source driving each re-solve is extrapolated
    from the last two estimates (FISTA weights), which speeds up the
    separation of nearby events.
    """
    mean_source, wavefields = state.mean_source, state.wavefields
    prev, t = None, 1.0
    for _ in range(problem.config.n_inner):
        mean_source = estimate_mean_source(problem, replace(state, wavefields=wavefields))
        drive = mean_source
        if problem.config.inner_momentum and prev is not None:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            theta = (t - 1.0) / t_next
            t = t_next
            drive = replace(
                mean_source, sources=mean_source.sources + theta * (mean_source.sources - prev)
            )
        prev = mean_source.sources
        wavefields = reconstruct_wavefield_with_source(problem, state, drive)
    return mean_source, wavefields


def pick_events(values, grid, threshold=0.3, min_distance=None):
    """Greedy peak picking on ``|values|`` over the interior grid.

    Candidates are 8-neighbour local maxima at or above ``threshold`` times
    the global maximum. They are accepted in order of decreasing amplitude
    (ties by scan order) when at least ``min_distance`` meters from every
    accepted pick. ``values`` may be given on the padded or interior grid.
    Returns an :class:`EventSet` with empty signatures.
    """
    values = np.asarray(values)
    if values.size == grid.n_pad:
        values = grid.restrict(values.ravel())
    if values.size != grid.n:
        raise ValueError("mean source does not match the grid")
    if not np.all(np.isfinite(values)):
        raise ValueError("mean source must be finite")
    if min_distance is None:
        min_distance = 3 * grid.h
    R = np.abs(values).reshape(grid.shape)
    peak = R.max()
    if peak == 0:
        return EventSet()
    is_max = (R == ndimage.maximum_filter(R, size=3, mode="constant", cval=-np.inf))
    is_max &= R >= threshold * peak
    cand = np.flatnonzero(is_max.ravel())
    order = cand[np.lexsort((cand, -R.ravel()[cand]))]
    picks = []
    for c in order:
        i, j = divmod(int(c), grid.nx)
        if all(np.hypot(i - a, j - b) * grid.h >= min_distance for a, b in picks):
            picks.append((i, j))
    locs = [interior_flat_index(i, j, grid) for i, j in picks]
    return EventSet(locs, None, [R[i, j] for i, j in picks])


def joint_update_wavefields_signatures(problem, state, events=None):
    """Exact minimizer over (u, s) of the dual-shifted bordered system."""
    events = state.events if events is None else events
    if events.p == 0:
        raise ValueError("joint update needs at least one event")
    sq_lam, sq_gamma = np.sqrt(problem.lam), np.sqrt(problem.gamma)

    def one(k):
        op = problem.operator(k, state.model, state.model_version)
        sys = StackedSystem(
            op.matrix,
            problem.P,
            problem.lam,
            problem.gamma,
            -state.dual_b[k] / sq_lam,
            sq_gamma * problem.data[k] - state.dual_d[k] / sq_gamma,
        )
        factor = problem.factor(k, state.model, state.model_version)
        return solve_augmented(AugmentedSystem(sys, events.locations), factor)

    out = problem.map(one)
    wavefields = np.array([u for u, _ in out])
    signatures = np.array([s for _, s in out])
    return wavefields, signatures


def build_model_subproblem(problem, state, tv_weight=None):
    """Diagonal quadratic ``lam (m^T H m - 2 g^T m)`` of the wave-equation misfit in m.

    ``H = sum_w w^4 |u|^2`` and
    ``g = sum_w Re[conj(w^2 u) (Phi s - mu_b / lam - Lap u)]`` on interior cells.
    """
    g_ = problem.grid
    model = state.model
    m_pad = g_.pad(np.asarray(model.m))
    H = np.zeros(g_.n)
    g = np.zeros(g_.n)
    for k, w in enumerate(problem.omegas):
        u = state.wavefields[k]
        op = problem.operator(k, model, state.model_version)
        lap_u = op.matrix @ u - w**2 * m_pad * u
        r = state.events.source_vector(k, g_.n_pad) - state.dual_b[k] / problem.lam - lap_u
        ju = w**2 * g_.restrict(u)
        H += np.abs(ju) ** 2
        g += np.real(np.conj(ju) * g_.restrict(r))
    if tv_weight is None:
        scale = float(np.mean(H)) * float(np.mean(model.m))
        tv_weight = problem.config.tv_weight * problem.lam * scale
    return TVSubproblem(
        H, g, problem.lam, model.m_min, model.m_max, g_.shape, tv_weight, np.asarray(model.m)
    )


def update_model(problem, state):
    """TV-regularized, box-constrained model step. Returns (model, TVSolution)."""
    if not problem.config.update_model:
        return state.model, None
    sub = build_model_subproblem(problem, state)
    sol = solve_tv_quadratic(sub, problem.config.tv_max_iter, problem.config.tv_tol)
    return state.model.with_m(sol.m), sol


def wave_residuals(problem, state):
    def one(k):
        op = problem.operator(k, state.model, state.model_version)
        return op.matrix @ state.wavefields[k] - state.events.source_vector(k, problem.grid.n_pad)

    return np.array(problem.map(one))


def update_duals(problem, state):
    """Dual ascent on both constraint blocks with ``A`` at the current model."""
    rb = wave_residuals(problem, state)
    rd = state.wavefields[:, problem.P.index] - problem.data
    return state.dual_b + problem.lam * rb, state.dual_d + problem.gamma * rd


def data_residual(problem, wavefields):
    num = sum(np.linalg.norm(wavefields[k, problem.P.index] - problem.data[k]) for k in range(problem.q))
    den = sum(np.linalg.norm(problem.data[k]) for k in range(problem.q))
    return float(num / den) if den > 0 else float(num)


def _relative_change(new, old):
    dn = np.linalg.norm(new - old)
    no = np.linalg.norm(old)
    if no == 0:
        return 0.0 if dn == 0 else np.inf
    return float(dn / no)


def support_size(values, fraction=0.01):
    a = np.abs(values)
    peak = a.max() if a.size else 0.0
    return int(np.count_nonzero(a > fraction * peak)) if peak > 0 else 0


def _joint_update_pruned(problem, state, picks):
    """Joint update, dropping the weakest pick while the signature block is singular."""
    while True:
        try:
            u, s = joint_update_wavefields_signatures(problem, state, picks)
            return picks, u, s
        except SingularBlockError:
            if picks.p == 1:
                raise
            weakest = int(np.argmin(picks.confidence))
            log.warning("singular signature block; dropping pick %s", picks.cells(problem.grid)[weakest])
            keep = [i for i in range(picks.p) if i != weakest]
            picks = EventSet(
                [picks.locations[i] for i in keep], None, picks.confidence[keep]
            )


def run_outer_iteration(problem, state):
    """One ADMM sweep; mutates and returns ``state`` plus a history record."""
    cfg = problem.config
    prev = state.mean_source.values.copy()
    mean_source, wavefields = inner_location_loop(problem, state)
    state.mean_source, state.wavefields = mean_source, wavefields
    picks = pick_events(mean_source.values, problem.grid, cfg.peak_threshold, cfg.peak_min_distance)
    tv = None
    if picks.p == 0:
        log.info("no events picked; skipping joint and model updates")
        state.events = EventSet((), np.zeros((problem.q, 0), dtype=complex))
    else:
        picks, u, s = _joint_update_pruned(problem, state, picks)
        state.wavefields = u
        state.events = EventSet(picks.locations, s, picks.confidence)
        if cfg.update_model:
            model, tv = update_model(problem, state)
            state.model = model
            state.model_version += 1
            problem.set_version(state.model_version)
    state.dual_b, state.dual_d = update_duals(problem, state)

    rb = wave_residuals(problem, state)
    src_norm = sum(np.linalg.norm(state.events.source_vector(k, problem.grid.n_pad)) for k in range(problem.q))
    rb_norm = float(np.sum(np.linalg.norm(rb, axis=1)))
    record = {
        "iteration": len(state.history) + 1,
        "data_residual": data_residual(problem, state.wavefields),
        "wave_residual": rb_norm / src_norm if src_norm > 0 else rb_norm,
        "source_change": _relative_change(mean_source.values, prev),
        "support": support_size(mean_source.values),
        "n_events": state.events.p,
        "locations": state.events.cells(problem.grid),
        "tv_converged": None if tv is None else bool(tv.converged),
    }
    state.history.append(record)
    return state, record


def run_inversion(model0, acquisition, data, config, callback=None):
    """Run the full ADMM loop; returns an :class:`InversionResult`.

    ``callback(state, record)`` is invoked after every outer iteration.
    Stops early when the relative mean-source change and the relative data
    residual both fall below their tolerances.
    """
    check_dispersion(model0, acquisition)
    pml_v = config.pml_velocity
    if pml_v is None:
        pml_v = float(np.max(model0.velocity))
    problem = InversionProblem(acquisition, data, config, pml_v)
    state = initial_state(problem, model0)
    state.wavefields = reconstruct_initial_wavefield(problem, model0, state.model_version)
    converged = False
    for _ in range(config.n_outer):
        state, record = run_outer_iteration(problem, state)
        log.info(
            "iteration %d: data residual %.3e, source change %.3e, %d events",
            record["iteration"], record["data_residual"], record["source_change"], record["n_events"],
        )
        if callback is not None:
            callback(state, record)
        if (
            record["source_change"] < config.tol_source_change
            and record["data_residual"] < config.tol_data_residual
        ):
            converged = True
            break
    return InversionResult(state.events, state.model, state.history, converged, state)
