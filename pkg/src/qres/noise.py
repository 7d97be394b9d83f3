"""Noise covariance construction, correlated sampling and perturbations.

Covariances are built per component and summed; extended targets and
receiver bandwidth reuse the jammer kernels as signal covariances since
the functional form is identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import j1

from .geometry import ArrayGeometry


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class White:
    sigma2: float = 1.0

    def covariance(self, geom: ArrayGeometry) -> np.ndarray:
        if self.sigma2 < 0:
            raise NoiseError("sigma2 must be non-negative")
        return self.sigma2 * np.eye(geom.n_elements, dtype=complex)


@dataclass(frozen=True)
class LinearJammer:
    """Angularly limited white noise on the u interval [u_bar-s, u_bar+s]."""

    power: float
    s: float
    u_bar: float = 0.0

    def covariance(self, geom: ArrayGeometry) -> np.ndarray:
        return jammer_covariance(geom, self)


@dataclass(frozen=True)
class PlanarJammer:
    """Angularly limited white noise on a disk of radius r around (u_bar, v_bar)."""

    power: float
    r: float
    u_bar: float = 0.0
    v_bar: float = 0.0

    def covariance(self, geom: ArrayGeometry) -> np.ndarray:
        return jammer_covariance(geom, self)


@dataclass(frozen=True)
class FluctuatingWhite:
    """Independent per-element noise powers, uniform within +-c around sigma2.

    The powers are drawn once per run (not per snapshot); pass an rng when
    constructing the NoiseModel to realize them.
    """

    sigma2: float = 1.0
    c: float = 0.25

    def realize(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return draw_fluctuating_powers(self.sigma2, self.c, n, rng)


def draw_fluctuating_powers(sigma2: float, c: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-element powers uniform on [sigma2(1-c), sigma2(1+c)].

    The default c = 1/4 corresponds to the 1 dB fluctuation case.
    """
    if not 0.0 <= c < 1.0:
        raise NoiseError("fluctuation fraction c must be in [0, 1)")
    return rng.uniform(sigma2 * (1.0 - c), sigma2 * (1.0 + c), n)


def jammer_covariance(geom: ArrayGeometry, component) -> np.ndarray:
    """Covariance of a constant-power-density jammer patch.

    Linear: entry (k,l) = p^2 sinc((x_k-x_l) s) exp(-j (x_k-x_l) u_bar).
    Planar: p^2 Lambda_1(r d_kl) exp(-j((x_k-x_l) u_bar + (y_k-y_l) v_bar))
    with Lambda_1(x) = 2 J_1(x)/x.
    """
    if isinstance(component, LinearJammer):
        if not 0.0 < component.s < 1.0:
            raise NoiseError("linear jammer width s must satisfy 0 < s < 1")
        dx = geom.x[:, None] - geom.x[None, :]
        kernel = np.sinc(dx * component.s / np.pi)
        return component.power * kernel * np.exp(-1j * dx * component.u_bar)
    if isinstance(component, PlanarJammer):
        if not 0.0 < component.r < 1.0:
            raise NoiseError("planar jammer radius r must satisfy 0 < r < 1")
        dx = geom.x[:, None] - geom.x[None, :]
        dy = geom.y[:, None] - geom.y[None, :]
        dist = np.hypot(dx, dy) * component.r
        kernel = np.ones_like(dist)
        nz = dist > 0
        kernel[nz] = 2.0 * j1(dist[nz]) / dist[nz]
        phase = np.exp(-1j * (dx * component.u_bar + dy * component.v_bar))
        return component.power * kernel * phase
    raise NoiseError(f"not a jammer component: {component!r}")


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor L with L L* = cov; eigendecomposition fallback clamps tiny
    negative eigenvalues that appear for numerically rank-deficient kernels."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(cov)
    floor = -1e-10 * max(np.trace(cov).real, 1.0)
    if evals.min() < floor:
        raise NoiseError(f"covariance is not PSD (min eigenvalue {evals.min():.3e})")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


class NoiseModel:
    """Composite noise: covariance R = sum of component covariances."""

    def __init__(self, geom: ArrayGeometry, components=(White(1.0),), rng=None):
        self.geom = geom
        self.components = tuple(components)
        n = geom.n_elements
        cov = np.zeros((n, n), dtype=complex)
        self.fluctuating_powers = None
        for comp in self.components:
            if isinstance(comp, FluctuatingWhite):
                if rng is None:
                    raise NoiseError("FluctuatingWhite needs an rng to draw per-run powers")
                powers = comp.realize(n, rng)
                self.fluctuating_powers = powers
                cov += np.diag(powers).astype(complex)
            else:
                cov += comp.covariance(geom)
        self.covariance = cov
        self._factor = _psd_factor(cov)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        n = self.geom.n_elements
        w = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
        return self._factor @ w


def sample_noise(model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    return model.sample(rng)


# ---------------------------------------------------------------------------
# measurement perturbations


@dataclass(frozen=True)
class CouplingMatrix:
    matrix: np.ndarray

    def apply(self, z: np.ndarray) -> np.ndarray:
        c = np.asarray(self.matrix)
        if c.shape != (z.shape[-1], z.shape[-1]):
            raise NoiseError("coupling matrix dimensions must match the snapshot")
        return z @ c.T if z.ndim > 1 else c @ z


@dataclass(frozen=True)
class Quantize:
    """Round real and imaginary parts to the nearest multiple of ``step``."""

    step: float

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self.step <= 0:
            return z.copy()
        d = self.step
        return d * np.round(z.real / d) + 1j * d * np.round(z.imag / d)


@dataclass(frozen=True)
class Clip:
    """Clamp real and imaginary parts at bq * rms per component.

    ``rms`` is the theoretical per-element root power sqrt(E{z z*}),
    supplied by the caller; scalar or length-N.
    """

    bq: float
    rms: float | np.ndarray = 1.0

    def apply(self, z: np.ndarray) -> np.ndarray:
        limit = self.bq * np.asarray(self.rms)
        return np.clip(z.real, -limit, limit) + 1j * np.clip(z.imag, -limit, limit)


def apply_perturbation(perturbation, z: np.ndarray) -> np.ndarray:
    """Apply a single perturbation or a list of them in order."""
    z = np.asarray(z, dtype=complex)
    if isinstance(perturbation, (list, tuple)):
        for p in perturbation:
            z = apply_perturbation(p, z)
        return z
    return perturbation.apply(z)


def load_coupling_matrix(path) -> np.ndarray:
    """Read an N x N complex matrix stored as row-major ``re im`` pairs."""
    values = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            values.extend(float(tok) for tok in line.split())
    count = len(values)
    n = round((count / 2) ** 0.5)
    if 2 * n * n != count:
        raise NoiseError(f"{path}: expected 2*N^2 reals, got {count}")
    flat = np.asarray(values).reshape(n * n, 2)
    return (flat[:, 0] + 1j * flat[:, 1]).reshape(n, n)
