"""Target amplitude models and snapshot synthesis z = A b + n.

Four amplitude models are supported:

1. deterministic      constant b_i = beta_i exp(j phi_i), optional Doppler
2. phase_fluct        constant magnitude, Gaussian phase around a mean
3. fixed_amp          constant magnitude, uniform phase on (0, 2 pi)
4. rayleigh           circular complex normal amplitudes (Swerling II)

Phases of model 2 are redrawn independently per snapshot; the source
material leaves the temporal structure open and this is the simplest
consistent choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ArrayGeometry, DirectionSet, transfer_matrix

DETERMINISTIC = "deterministic"
PHASE_FLUCT = "phase_fluct"
FIXED_AMP = "fixed_amp"
RAYLEIGH = "rayleigh"

_VARIANTS = (DETERMINISTIC, PHASE_FLUCT, FIXED_AMP, RAYLEIGH)


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class SignalModel:
    """Per-target amplitude statistics.

    ``magnitude`` is beta_i for models 1-3 and unused for model 4, where
    ``power`` (sigma_i^2 = E|b_i|^2) applies instead.  ``mean_phase`` and
    ``phase_std`` parameterize models 1 and 2.  ``doppler_increment`` only
    applies to the deterministic model and advances each target's phase
    per snapshot.
    """

    variant: str
    magnitude: np.ndarray | None = None
    power: np.ndarray | None = None
    mean_phase: np.ndarray | None = None
    phase_std: np.ndarray | None = None
    doppler_increment: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise SignalError(f"unknown signal model variant: {self.variant!r}")
        if self.variant == RAYLEIGH:
            power = _as_positive("power", self.power)
            object.__setattr__(self, "power", power)
            return
        mag = _as_positive("magnitude", self.magnitude)
        object.__setattr__(self, "magnitude", mag)
        m = mag.shape[0]
        phase = _as_vector("mean_phase", self.mean_phase, m, default=0.0)
        object.__setattr__(self, "mean_phase", phase)
        if self.variant == PHASE_FLUCT:
            std = _as_vector("phase_std", self.phase_std, m, default=0.0)
            if np.any(std < 0):
                raise SignalError("phase_std must be non-negative")
            object.__setattr__(self, "phase_std", std)
        if self.variant == DETERMINISTIC and self.doppler_increment is not None:
            inc = _as_vector("doppler_increment", self.doppler_increment, m)
            object.__setattr__(self, "doppler_increment", inc)

    @property
    def m(self) -> int:
        ref = self.power if self.variant == RAYLEIGH else self.magnitude
        return ref.shape[0]

    def mean_powers(self) -> np.ndarray:
        """E|b_i|^2 per target."""
        if self.variant == RAYLEIGH:
            return self.power.copy()
        return self.magnitude**2


def _as_positive(label, value):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1 or arr.size < 1:
        raise SignalError(f"{label} must be a non-empty vector")
    if np.any(arr <= 0) or not np.isfinite(arr).all():
        raise SignalError(f"{label} entries must be positive and finite")
    return arr


def _as_vector(label, value, m, default=None):
    if value is None:
        if default is None:
            raise SignalError(f"{label} is required")
        return np.full(m, float(default))
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (m,):
        raise SignalError(f"{label} must have one entry per target (expected {m})")
    return arr


def from_snr(variant: str, snr_db: float, m: int, noise_power: float = 1.0, **kwargs) -> SignalModel:
    """Equal-power model at a per-element SNR of ``snr_db``.

    The convention is SNR = sum_i E|b_i|^2 / E|n_1|^2, so each of the m
    targets receives an equal share of the total signal power.
    """
    total = 10.0 ** (snr_db / 10.0) * noise_power
    per_target = total / m
    if variant == RAYLEIGH:
        return SignalModel(variant=RAYLEIGH, power=np.full(m, per_target), **kwargs)
    return SignalModel(variant=variant, magnitude=np.full(m, np.sqrt(per_target)), **kwargs)


def draw_amplitudes(model: SignalModel, rng: np.random.Generator, snapshot_index: int = 0) -> np.ndarray:
    """One complex amplitude vector b."""
    if model.variant == DETERMINISTIC:
        phase = model.mean_phase.copy()
        if model.doppler_increment is not None:
            phase = phase + snapshot_index * model.doppler_increment
        return model.magnitude * np.exp(1j * phase)
    if model.variant == PHASE_FLUCT:
        phase = rng.normal(model.mean_phase, model.phase_std)
        return model.magnitude * np.exp(1j * phase)
    if model.variant == FIXED_AMP:
        phase = rng.uniform(0.0, 2.0 * np.pi, model.m)
        return model.magnitude * np.exp(1j * phase)
    # rayleigh: complex normal with independent re/im parts of variance power/2
    scale = np.sqrt(model.power / 2.0)
    return scale * (rng.standard_normal(model.m) + 1j * rng.standard_normal(model.m))


def amplitude_covariance(model: SignalModel) -> tuple[np.ndarray, bool]:
    """Hermitian B = E{b b*} and a flag marking the singular rank-1 case.

    Model 2 has off-diagonal entries beta_i beta_k e^{j(phi_i-phi_k)}
    e^{-(s_i^2+s_k^2)/2} and beta_i^2 on the diagonal; model 1 is its
    zero-variance limit and yields the singular dyad b b*.
    """
    m = model.m
    if model.variant == RAYLEIGH:
        return np.diag(model.power).astype(complex), False
    if model.variant == FIXED_AMP:
        return np.diag(model.magnitude**2).astype(complex), False
    if model.variant == DETERMINISTIC:
        b = model.magnitude * np.exp(1j * model.mean_phase)
        return np.outer(b, b.conj()), m > 1
    mean = model.magnitude * np.exp(1j * model.mean_phase) * np.exp(-model.phase_std**2 / 2.0)
    cov = np.outer(mean, mean.conj())
    np.fill_diagonal(cov, model.magnitude**2)
    return cov, False


def synthesize(
    geom: ArrayGeometry,
    dirs: DirectionSet,
    model: SignalModel,
    noise,
    count: int,
    rng: np.random.Generator,
    return_amplitudes: bool = False,
):
    """``count`` snapshots z_k = A b_k + n_k with fresh draws per snapshot.

    ``noise`` is a NoiseModel (or None for the noise-free case).  Models
    2-4 redraw b each snapshot; model 1 keeps it constant apart from the
    optional Doppler phase advance.
    """
    if dirs.m != model.m:
        raise SignalError(f"direction count {dirs.m} != model target count {model.m}")
    a_mat = transfer_matrix(geom, dirs)
    n = geom.n_elements
    snapshots = np.empty((count, n), dtype=complex)
    amps = np.empty((count, model.m), dtype=complex)
    for k in range(count):
        amps[k] = draw_amplitudes(model, rng, snapshot_index=k)
        snapshots[k] = a_mat @ amps[k]
        if noise is not None:
            snapshots[k] += noise.sample(rng)
    if return_amplitudes:
        return snapshots, amps
    return snapshots
