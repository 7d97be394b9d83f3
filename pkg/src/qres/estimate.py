"""Direction estimators and their asymptotic/cost analysis.

Grid search enumerates Q over beam combinations with a precomputed
decoupling table.  The projected stochastic approximation consumes one
snapshot per step,

    w_{n+1} = [w_n - (mu/n) G(w_n, z_n)]_{Omega1, Omega2},

with the correction vector G selected by variant and the step scale mu
calibrated from the first three snapshots unless given explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _kernels
from .geometry import ArrayGeometry, DirectionSet, beamwidth
from .qfunc import (
    IllConditioned,
    expected_hessian_at_min,
    projector,
    projector_first_derivatives,
    q_value,
    transfer_matrix,
)

PLAIN = "plain"
LOG_NORMALIZED = "log"
ARCTAN_NORMALIZED = "arctan"
HARD_LIMITED = "hard_limit"
SIGN_ONLY = "sign"

_VARIANTS = (PLAIN, LOG_NORMALIZED, ARCTAN_NORMALIZED, HARD_LIMITED, SIGN_ONLY)


class EstimationError(ValueError):
    pass


class StepTooSmall(ValueError):
    """mu * lambda_min <= 1/2: the asymptotic normality theorem does not apply."""


# ---------------------------------------------------------------------------
# grid search


def linear_grid(geom: ArrayGeometry, center, intervals: int) -> np.ndarray:
    """intervals+1 beams spanning a beamwidth around the coarse direction."""
    bw = beamwidth(geom)
    u_g = float(center[0]) if not np.isscalar(center) else float(center)
    u = u_g + np.linspace(-bw / 2.0, bw / 2.0, intervals + 1)
    return np.column_stack([u, np.zeros_like(u)])


def planar_triangular_grid(geom: ArrayGeometry, center, intervals: int) -> np.ndarray:
    """Hexagonal bundle on a triangular lattice with 1/intervals BW spacing.

    The bundle is the lattice ball of hex radius intervals/2 - 1 around the
    coarse direction (rings stay one grid step inside the search disk); a
    1/6 BW grid therefore carries 19 beams.
    """
    bw = beamwidth(geom)
    spacing = bw / intervals
    rings = max(intervals // 2 - 1, 0)
    u_g, v_g = float(center[0]), float(center[1])
    pts = []
    for p in range(-rings, rings + 1):
        for q in range(-rings, rings + 1):
            if max(abs(p), abs(q), abs(p + q)) > rings:
                continue
            u = u_g + spacing * (p + q / 2.0)
            v = v_g + spacing * q * (np.sqrt(3.0) / 2.0)
            pts.append((u, v))
    return np.asarray(sorted(pts))


def triangular_grid_size(intervals: int) -> int:
    rings = max(intervals // 2 - 1, 0)
    return 1 + 3 * rings * (rings + 1)


class GridTable:
    """Precomputed beams and decoupling inverses for a fixed grid.

    The Gram inverses are keyed by grid-index tuple so repeated searches
    (averaged grid search, Monte Carlo trials) reuse them.
    """

    def __init__(self, geom: ArrayGeometry, grid_directions, m: int):
        grid = np.atleast_2d(np.asarray(grid_directions, dtype=float))
        if grid.shape[1] != 2:
            raise EstimationError("grid directions must be (K, 2)")
        if len({tuple(p) for p in grid}) != len(grid):
            raise EstimationError("grid points must be distinct")
        if m < 1 or m > len(grid):
            raise EstimationError("need 1 <= M <= number of grid points")
        self.geom = geom
        self.grid = grid
        self.m = m
        self.steering = _kernels.steer(geom.x, geom.y, grid[:, 0], grid[:, 1])
        gram = self.steering.conj().T @ self.steering
        self.combos = list(combinations(range(len(grid)), m))
        self.inverses = {
            combo: np.linalg.inv(gram[np.ix_(combo, combo)]) for combo in self.combos
        }

    @property
    def n_evaluations(self) -> int:
        return len(self.combos)


@dataclass
class GridSearchResult:
    directions: DirectionSet
    q: float
    n_evaluations: int
    best_combo: tuple[int, ...]


def grid_search(z, table: GridTable) -> GridSearchResult:
    """Exact argmin of Q over all size-M beam combinations.

    Ties resolve to the first minimum in lexicographic combination order.
    """
    z = np.asarray(z, dtype=complex)
    beams = table.steering.conj().T @ z
    energy = float(np.real(z.conj() @ z))
    best_q = math.inf
    best = None
    for combo in table.combos:
        s = beams[list(combo)]
        q = energy - float(np.real(s.conj() @ (table.inverses[combo] @ s)))
        if q < best_q:
            best_q = q
            best = combo
    dirs = DirectionSet(u=table.grid[list(best), 0], v=table.grid[list(best), 1]).canonical()
    return GridSearchResult(dirs, max(best_q, 0.0), table.n_evaluations, best)


def averaged_grid_search(snapshots, table: GridTable) -> DirectionSet:
    """Componentwise mean of canonically ordered per-snapshot grid estimates."""
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=complex))
    if snapshots.shape[0] < 1:
        raise EstimationError("need at least one snapshot")
    acc = np.zeros((table.m, 2))
    for z in snapshots:
        est = grid_search(z, table).directions
        acc += est.as_array()
    acc /= snapshots.shape[0]
    return DirectionSet(u=acc[:, 0], v=acc[:, 1])


# ---------------------------------------------------------------------------
# stochastic approximation


@dataclass
class SAConfig:
    """Iteration settings; mu=None calibrates the step from three snapshots.

    delta defaults to 0.9 for linear and 1.8 for planar arrays.  eta is the
    saturation bound of the correction vector; for the hard-limited variant
    it defaults to 0.8 times the calibrated gradient scale.
    """

    variant: str = PLAIN
    mu: float | None = None
    delta: float | None = None
    eta: float | None = None
    iterations: int = 17
    epsilon: float = 0.1
    spread: float = 0.9

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise EstimationError(f"unknown SA variant: {self.variant!r}")
        if self.mu is not None and self.mu <= 0:
            raise EstimationError("mu must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise EstimationError("epsilon must be in (0, 1)")
        if self.iterations < 1:
            raise EstimationError("need at least one iteration")


@dataclass
class EstimationTrace:
    directions: np.ndarray          # (iterations + 1, M, 2), includes start
    q_values: np.ndarray            # Q(w_n, z_n) per consumed iteration snapshot
    estimate: DirectionSet
    mu: float
    gradient_scale: float | None    # calibrated ae, when computed
    projection_events: int
    snapshots_used: int


def initial_directions(geom: ArrayGeometry, center, m: int, spread: float = 0.9) -> np.ndarray:
    """Widely separated start configuration around the coarse direction.

    Linear: equally spaced across +-spread*BW/2 in u.  Planar: the pair
    splits along v, three targets spread along the diagonal, more sit on
    a circle of radius spread*BW/2.
    """
    bw = beamwidth(geom)
    radius = spread * bw / 2.0
    u_g, v_g = (float(center[0]), float(center[1])) if not np.isscalar(center) else (float(center), 0.0)
    out = np.zeros((m, 2))
    out[:, 0] = u_g
    out[:, 1] = v_g
    if m == 1:
        return out
    if geom.kind == "linear":
        out[:, 0] += np.linspace(-radius, radius, m)
        return out
    if m == 2:
        out[:, 1] += np.array([-radius, radius])
    elif m == 3:
        step = radius * 2.0 / 3.0
        out[:, 0] += np.array([-step, 0.0, step])
        out[:, 1] += np.array([-step, 0.0, step])
    else:
        ang = 2.0 * np.pi * np.arange(m) / m
        out[:, 0] += radius * np.cos(ang)
        out[:, 1] += radius * np.sin(ang)
    return out


def _inside_search_region(u, v, center, bw, eps, linear):
    radius2 = (bw / 2.0) ** 2
    cu, cv = center
    m = u.shape[0]
    for i in range(m):
        du = u[i] - cu
        dv = v[i] - cv
        if du * du + dv * dv >= radius2:
            return False
    if linear:
        min_sep = eps * bw / 2.0
        for i in range(m - 1):
            if u[i + 1] - u[i] < min_sep:
                return False
    return True


def _project_to_inner_region(u, v, center, bw, eps, linear):
    """Euclidean-style projection onto the closure of the inner region:
    per-target disk clamp, then symmetric separation repair for linear."""
    u = u.copy()
    v = v.copy()
    cu, cv = center
    inner = (bw / 2.0) * (1.0 - eps)
    for _ in range(8):
        delta_u = u - cu
        delta_v = v - cv
        dist = np.hypot(delta_u, delta_v)
        too_far = dist > inner
        if too_far.any():
            shrink = inner / dist[too_far]
            u[too_far] = cu + delta_u[too_far] * shrink
            v[too_far] = cv + delta_v[too_far] * shrink
        if not linear:
            return u, v
        order = np.argsort(u, kind="stable")
        u = u[order]
        v = v[order]
        min_sep = eps * bw / 2.0
        gaps = np.diff(u)
        if not (gaps < min_sep).any():
            return u, v
        for i in np.where(gaps < min_sep)[0]:
            mid = 0.5 * (u[i] + u[i + 1])
            u[i] = mid - min_sep / 2.0
            u[i + 1] = mid + min_sep / 2.0
    return u, v


def _correction(variant, grad, q, eta):
    g = grad
    if variant == LOG_NORMALIZED:
        g = grad / q if q > 0 else np.zeros_like(grad)
    elif variant == ARCTAN_NORMALIZED:
        g = grad / (1.0 + q * q)
    elif variant == SIGN_ONLY:
        norm = np.linalg.norm(grad)
        return grad / norm if norm > 0 else np.zeros_like(grad)
    if eta is not None:
        norm = np.linalg.norm(g)
        if norm > eta:
            g = g * (eta / norm)
    return g


def stochastic_approximation(
    snapshots,
    geom: ArrayGeometry,
    center,
    m: int,
    config: SAConfig | None = None,
    rng=None,
) -> EstimationTrace:
    """Projected stochastic approximation over a snapshot stream.

    ``snapshots`` is any iterable of measurement vectors; three extra
    snapshots are consumed up front when the step scale is auto-calibrated
    (the iteration counter then starts at n = 3).
    """
    config = config or SAConfig()
    if np.isscalar(center):
        center = (float(center), 0.0)
    bw = beamwidth(geom)
    linear = geom.kind == "linear"
    start = initial_directions(geom, center, m, config.spread)
    u_state = np.ascontiguousarray(start[:, 0])
    v_state = np.ascontiguousarray(start[:, 1])
    stream = iter(np.asarray(z, dtype=complex) for z in snapshots)

    x_pos, y_pos = geom.x, geom.y

    def eval_grad(u, v, z):
        q, _, gu, gv, status = _kernels.q_eval(x_pos, y_pos, u, v, z, True)
        if status != _kernels.STATUS_OK:
            raise IllConditioned(np.inf)
        grad = gu if linear else np.concatenate([gu, gv])
        return q, grad

    def next_snapshot():
        try:
            return next(stream)
        except StopIteration:
            raise EstimationError("snapshot stream exhausted") from None

    need_scale = config.mu is None or (config.eta is None and config.variant == HARD_LIMITED)
    scale = None
    n0 = 1
    used = 0
    if need_scale:
        norms = []
        for _ in range(3):
            _, grad = eval_grad(u_state, v_state, next_snapshot())
            norms.append(np.linalg.norm(grad))
            used += 1
        scale = float(np.mean(norms))
        n0 = 3
    if config.mu is not None:
        mu = config.mu
    else:
        delta = config.delta if config.delta is not None else (0.9 if linear else 1.8)
        if scale <= 0:
            raise EstimationError("gradient scale calibrated to zero; cannot derive mu")
        mu = delta / scale * bw / 2.0
    eta = config.eta
    if eta is None and config.variant == HARD_LIMITED:
        eta = 0.8 * scale

    path = np.empty((config.iterations + 1, m, 2))
    path[0, :, 0] = u_state
    path[0, :, 1] = v_state
    q_vals = np.empty(config.iterations)
    projections = 0
    for it in range(config.iterations):
        z = next_snapshot()
        used += 1
        q, grad = eval_grad(u_state, v_state, z)
        q_vals[it] = q
        corr = _correction(config.variant, grad, q, eta)
        step = mu / (n0 + it)
        u_state = u_state - step * corr[:m]
        if not linear:
            v_state = v_state - step * corr[m:]
        if not _inside_search_region(u_state, v_state, center, bw, config.epsilon, linear):
            u_state, v_state = _project_to_inner_region(
                u_state, v_state, center, bw, config.epsilon, linear
            )
            projections += 1
        path[it + 1, :, 0] = u_state
        path[it + 1, :, 1] = v_state
    estimate = DirectionSet(u=u_state, v=v_state).canonical()
    return EstimationTrace(
        directions=path,
        q_values=q_vals,
        estimate=estimate,
        mu=mu,
        gradient_scale=scale,
        projection_events=projections,
        snapshots_used=used,
    )


# ---------------------------------------------------------------------------
# asymptotic covariance of the iteration (Fabian)


@dataclass
class AsymptoticReport:
    covariance: np.ndarray      # cov of sqrt(n) (w_n - w_ex)
    eigenvalues: np.ndarray     # of E{Q_ww} at the minimum, ascending
    mu: float
    mu_bar: float               # 1 / lambda_min
    mean_dispersion: float      # trace / dimension


def asymptotic_covariance(
    geom: ArrayGeometry,
    dirs_ex: DirectionSet,
    signal,
    mu: float,
    noise_cov=None,
) -> AsymptoticReport:
    """Asymptotic covariance of sqrt(n)(w_n - w_ex) for step scale mu.

    ``signal`` is a deterministic amplitude vector b (then the gradient
    covariance equals the curvature matrix) or a Hermitian amplitude
    covariance B for zero-mean models, where the gradient covariance is
    trace(Gamma_p R Gamma_q R) with R = I + A B A*.

    Raises StepTooSmall when mu * lambda_min <= 1/2.
    """
    signal = np.asarray(signal)
    hess = expected_hessian_at_min(geom, dirs_ex, signal)
    evals, evecs = np.linalg.eigh(hess)
    if evals.min() <= 0:
        raise EstimationError("curvature at the minimum is not positive definite")
    if mu * evals.min() <= 0.5:
        raise StepTooSmall(
            f"mu*lambda_min = {mu * evals.min():.4f} <= 1/2; increase mu (mu_bar = {1.0 / evals.min():.4g})"
        )
    if signal.ndim == 1:
        sigma = mu**2 * hess
    else:
        a_mat = transfer_matrix(geom, dirs_ex)
        r_mat = np.eye(geom.n_elements, dtype=complex) + a_mat @ signal @ a_mat.conj().T
        gammas = projector_first_derivatives(geom, dirs_ex)
        k = len(gammas)
        sigma = np.empty((k, k))
        pre = [g @ r_mat for g in gammas]
        for i in range(k):
            for j in range(i, k):
                sigma[i, j] = sigma[j, i] = mu**2 * float(np.trace(pre[i] @ pre[j]).real)
    lam = mu * evals
    rotated = evecs.T @ sigma @ evecs
    m_mat = rotated / (lam[:, None] + lam[None, :] - 1.0)
    cov = evecs @ m_mat @ evecs.T
    return AsymptoticReport(
        covariance=cov,
        eigenvalues=evals,
        mu=mu,
        mu_bar=1.0 / evals.min(),
        mean_dispersion=float(np.trace(cov) / cov.shape[0]),
    )


# ---------------------------------------------------------------------------
# operation-count model


@dataclass
class CostReport:
    sa_multiplications: int
    sa_roots: int
    sa_total: int
    grid_multiplications: int | None
    crossovers: list[tuple[int, int]] = field(default_factory=list)


def cost_model(
    m: int,
    kind: str = "linear",
    iterations: int | None = None,
    grid_points: int | None = None,
    samples: int | None = None,
    max_crossovers: int = 8,
) -> CostReport:
    """Basic-operation counts (complex multiplications) of both estimators.

    Stochastic approximation: 2i(M^2+M) + i roots (linear) or
    3i(M^2+M/2) + i roots (planar).  Averaged grid search over k beams and
    m samples: m C(k,M)(M^2+M).  Crossovers equate the multiplication
    counts; each root counts as one operation in the totals.
    """
    if m < 0:
        raise EstimationError("M must be non-negative")
    if m == 0:
        return CostReport(0, 0, 0, 0 if grid_points else None, [])
    i = iterations or 0
    if kind == "linear":
        sa_per_iter = 2 * (m * m + m)
    elif kind == "planar":
        sa_per_iter = int(3 * (m * m + m / 2.0))
    else:
        raise EstimationError(f"unknown array kind: {kind!r}")
    sa_mult = sa_per_iter * i
    grid_mult = None
    crossovers = []
    if grid_points is not None:
        per_sample = math.comb(grid_points, m) * (m * m + m)
        grid_mult = per_sample * (samples or 0)
        for m_samples in range(1, max_crossovers + 1):
            total = per_sample * m_samples
            if total % sa_per_iter == 0:
                crossovers.append((m_samples, total // sa_per_iter))
    return CostReport(
        sa_multiplications=sa_mult,
        sa_roots=i,
        sa_total=sa_mult + i,
        grid_multiplications=grid_mult,
        crossovers=crossovers,
    )
