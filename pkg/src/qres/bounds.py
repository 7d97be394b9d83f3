"""Fisher information, Cramer-Rao lower bounds and curvature analysis.

For the deterministic signal model the direction block of the inverse
Fisher matrix equals the inverse of the curvature matrix of E{Q} at its
minimum, which is this module's central cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ArrayGeometry, DirectionSet, beamwidth, transfer_matrix
from .qfunc import direction_parameters, expected_hessian_at_min, projector


class SingularFisher(ValueError):
    def __init__(self, message, nullspace=None):
        super().__init__(message)
        self.nullspace = nullspace


@dataclass
class FisherBlocks:
    """Fisher matrix with an index map into its parameter blocks."""

    matrix: np.ndarray
    index_map: dict[str, np.ndarray]
    parameters: list[str]


@dataclass
class CurvatureReport:
    curvature: np.ndarray          # E{Q_ww} at the minimum
    eigenvalues: np.ndarray        # principal curvatures, ascending
    eigenvectors: np.ndarray       # columns = principal directions
    crlb_std_bw: np.ndarray        # per-direction CRLB std dev in BW units
    eccentricity: float


def _signal_jacobian(geom: ArrayGeometry, dirs: DirectionSet, b: np.ndarray):
    """Columns of ds/dtheta for theta = (omega; Re b; Im b), sigma^2 = 1."""
    a_mat = transfer_matrix(geom, dirs)
    params = direction_parameters(geom, dirs.m)
    cols = []
    names = []
    for target, axis in params:
        d = geom.x if axis == "x" else geom.y
        cols.append(-1j * d * a_mat[:, target] * b[target])
        names.append(f"{'u' if axis == 'x' else 'v'}{target + 1}")
    for i in range(dirs.m):
        cols.append(a_mat[:, i])
        names.append(f"re_b{i + 1}")
    for i in range(dirs.m):
        cols.append(1j * a_mat[:, i])
        names.append(f"im_b{i + 1}")
    return np.column_stack(cols), names, len(params)


def fisher_deterministic(geom: ArrayGeometry, dirs: DirectionSet, b) -> FisherBlocks:
    """F = 2 Re(s_theta* s_theta) for the deterministic amplitude model."""
    b = np.asarray(b, dtype=complex)
    if b.shape != (dirs.m,):
        raise ValueError("amplitude vector has wrong length")
    a_mat = transfer_matrix(geom, dirs)
    gram = a_mat.conj().T @ a_mat
    if np.linalg.cond(gram) > 1e12:
        raise SingularFisher("steering Gram matrix is singular")
    jac, names, n_dir = _signal_jacobian(geom, dirs, b)
    fisher = 2.0 * np.real(jac.conj().T @ jac)
    index_map = {
        "omega": np.arange(n_dir),
        "re_b": np.arange(n_dir, n_dir + dirs.m),
        "im_b": np.arange(n_dir + dirs.m, n_dir + 2 * dirs.m),
    }
    return FisherBlocks(matrix=fisher, index_map=index_map, parameters=names)


def _invert_with_nullspace(matrix: np.ndarray, label: str) -> np.ndarray:
    """Eigendecomposition inverse; raises with the nullspace on singularity."""
    evals, evecs = np.linalg.eigh(matrix)
    tol = max(matrix.shape[0] * np.finfo(float).eps * abs(evals).max(), 0.0)
    null = evals <= tol
    if null.any():
        raise SingularFisher(
            f"{label} is singular ({null.sum()} null directions)",
            nullspace=evecs[:, null],
        )
    return (evecs / evals) @ evecs.T


def crlb_directions(geom: ArrayGeometry, dirs: DirectionSet, b, snapshots: int = 1) -> np.ndarray:
    """Per-direction variance lower bounds: diag of (1/K) [F^{-1}]_{w x w}."""
    blocks = fisher_deterministic(geom, dirs, b)
    inv = _invert_with_nullspace(blocks.matrix, "Fisher matrix")
    omega = blocks.index_map["omega"]
    return np.diagonal(inv[np.ix_(omega, omega)]).copy() / snapshots


def fisher_model4(geom: ArrayGeometry, dirs: DirectionSet, powers) -> FisherBlocks:
    """Fisher matrix for Rayleigh targets over (directions, powers).

    F_ij = trace(R^{-1} dR_i R^{-1} dR_j) with R = I + A B A* and the
    derivatives assembled from the steering-column derivatives.
    """
    powers = np.asarray(powers, dtype=float)
    if powers.shape != (dirs.m,) or np.any(powers <= 0):
        raise ValueError("powers must be positive, one per target")
    a_mat = transfer_matrix(geom, dirs)
    n = geom.n_elements
    r_mat = np.eye(n, dtype=complex) + (a_mat * powers) @ a_mat.conj().T
    r_inv = np.linalg.inv(r_mat)
    params = direction_parameters(geom, dirs.m)
    derivs = []
    names = []
    for target, axis in params:
        d = geom.x if axis == "x" else geom.y
        col = -1j * d * a_mat[:, target]
        block = powers[target] * np.outer(col, a_mat[:, target].conj())
        derivs.append(block + block.conj().T)
        names.append(f"{'u' if axis == 'x' else 'v'}{target + 1}")
    for i in range(dirs.m):
        derivs.append(np.outer(a_mat[:, i], a_mat[:, i].conj()))
        names.append(f"power{i + 1}")
    k = len(derivs)
    fisher = np.empty((k, k))
    pre = [r_inv @ d for d in derivs]
    for i in range(k):
        for j in range(i, k):
            fisher[i, j] = fisher[j, i] = float(np.trace(pre[i] @ pre[j]).real)
    index_map = {
        "omega": np.arange(len(params)),
        "power": np.arange(len(params), k),
    }
    return FisherBlocks(matrix=fisher, index_map=index_map, parameters=names)


def crlb_directions_model4(geom, dirs, powers, snapshots: int = 1) -> np.ndarray:
    blocks = fisher_model4(geom, dirs, powers)
    inv = _invert_with_nullspace(blocks.matrix, "Fisher matrix")
    omega = blocks.index_map["omega"]
    return np.diagonal(inv[np.ix_(omega, omega)]).copy() / snapshots


def curvature_analysis(geom: ArrayGeometry, dirs: DirectionSet, amplitude) -> CurvatureReport:
    """Eigensystem of E{Q_ww} at the minimum plus CRLB standard deviations."""
    curv = expected_hessian_at_min(geom, dirs, amplitude)
    evals, evecs = np.linalg.eigh(curv)
    bw = beamwidth(geom)
    if evals.min() > 0:
        inv_diag = np.diagonal(np.linalg.inv(curv))
        crlb_std_bw = np.sqrt(inv_diag) / bw
        ecc = float(evals[-1] / evals[0])
    else:
        crlb_std_bw = np.full(curv.shape[0], np.inf)
        ecc = np.inf
    return CurvatureReport(
        curvature=curv,
        eigenvalues=evals,
        eigenvectors=evecs,
        crlb_std_bw=crlb_std_bw,
        eccentricity=ecc,
    )


# ---------------------------------------------------------------------------
# analytic two-target special case for symmetric linear arrays


def sum_difference_patterns(geom: ArrayGeometry, delta_u: float) -> tuple[float, complex, float]:
    """Sum pattern f, difference pattern d = -j f' and h = -f'' at delta_u."""
    x = geom.x
    f = float(np.cos(x * delta_u).sum())
    d = 1j * float(np.sum(x * np.sin(x * delta_u)))
    h = float(np.sum(x**2 * np.cos(x * delta_u)))
    return f, d, h


def equal_intensity_curvature(geom: ArrayGeometry, u1: float, u2: float) -> tuple[float, float]:
    """Analytic c11 and c12 = a_i* D Gamma D a_k for a symmetric linear array.

    Valid for arrays symmetric about the origin where a* D a = 0; used as
    an independent cross-check of the direct projector computation.
    """
    n = geom.n_elements
    f, d, h = sum_difference_patterns(geom, u2 - u1)
    denom = n * n - f * f
    c11 = float(np.sum(geom.x**2)) - n * abs(d) ** 2 / denom
    c12 = h - f * abs(d) ** 2 / denom
    return c11, c12


def direct_curvature_entries(geom: ArrayGeometry, dirs: DirectionSet) -> np.ndarray:
    """c_ik = a_i* D Gamma D a_k computed from the projector (u axis)."""
    a_mat = transfer_matrix(geom, dirs)
    gamma = projector(geom, dirs)
    da = geom.x[:, None] * a_mat
    return da.conj().T @ gamma @ da
