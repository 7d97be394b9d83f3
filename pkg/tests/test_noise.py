import numpy as np
import pytest

from qres import noise
from qres.geometry import DirectionSet, linear_array
from qres.noise import (
    Clip,
    CouplingMatrix,
    FluctuatingWhite,
    LinearJammer,
    NoiseError,
    NoiseModel,
    PlanarJammer,
    Quantize,
    White,
    apply_perturbation,
    draw_fluctuating_powers,
    jammer_covariance,
    load_coupling_matrix,
)


class TestJammerCovariance:
    def test_diagonal_is_power(self, elan11):
        for comp in (LinearJammer(2.5, 0.3), PlanarJammer(2.5, 0.3)):
            cov = jammer_covariance(elan11, comp)
            np.testing.assert_allclose(np.diagonal(cov), 2.5, rtol=1e-12)

    def test_linear_kernel_values(self):
        geom = linear_array(2, 0.5)  # separation pi
        s = 0.5
        cov = jammer_covariance(geom, LinearJammer(1.0, s, u_bar=0.2))
        sep = np.pi
        expected = np.sinc(sep * s / np.pi) * np.exp(-1j * sep * 0.2)
        assert cov[1, 0] == pytest.approx(expected, rel=1e-12)
        # kernel null: separation * s = pi
        cov_full = jammer_covariance(geom, LinearJammer(1.0, 1.0 - 1e-12))
        assert abs(cov_full[0, 1]) < 1e-9

    def test_planar_kernel_uses_bessel(self, elan25):
        from scipy.special import j1

        cov = jammer_covariance(elan25, PlanarJammer(1.0, 0.4, 0.1, -0.2))
        dx = elan25.x[3] - elan25.x[7]
        dy = elan25.y[3] - elan25.y[7]
        d = np.hypot(dx, dy) * 0.4
        expected = 2 * j1(d) / d * np.exp(-1j * (dx * 0.1 + dy * (-0.2)))
        assert cov[3, 7] == pytest.approx(expected, rel=1e-12)

    def test_positive_semidefinite(self, elan11, elan25):
        for geom, comp in [
            (elan11, LinearJammer(3.0, 0.7, 0.4)),
            (elan25, PlanarJammer(3.0, 0.6, 0.1, 0.1)),
        ]:
            cov = jammer_covariance(geom, comp)
            evals = np.linalg.eigvalsh(cov)
            assert evals.min() >= -1e-10 * np.trace(cov).real

    def test_invalid_width(self, elan11):
        with pytest.raises(NoiseError):
            jammer_covariance(elan11, LinearJammer(1.0, 1.5))

    def test_zero_power_vanishes(self, elan11):
        cov = jammer_covariance(elan11, LinearJammer(0.0, 0.5))
        assert np.abs(cov).max() == 0.0


class TestSampling:
    def test_white_sample_covariance(self, rng):
        geom = linear_array(4, 0.5)
        model = NoiseModel(geom, [White(1.0)])
        trials = 100_000
        draws = np.array([model.sample(rng) for _ in range(trials)])
        emp = (draws.conj()[:, :, None] * draws[:, None, :]).mean(axis=0).conj()
        assert np.abs(emp - np.eye(4)).max() < 5.0 / np.sqrt(trials)

    def test_composite_sample_covariance(self, rng):
        geom = linear_array(5, 0.5)
        model = NoiseModel(geom, [White(1.0), LinearJammer(2.0, 0.4, 0.3)])
        trials = 100_000
        draws = np.array([model.sample(rng) for _ in range(trials)])
        emp = (draws.conj()[:, :, None] * draws[:, None, :]).mean(axis=0).conj()
        err = np.linalg.norm(emp - model.covariance)
        bound = 5.0 * np.sqrt(25.0 / trials) * np.linalg.norm(model.covariance)
        assert err < bound

    def test_hermitian_within_tolerance(self, elan11):
        model = NoiseModel(elan11, [White(0.5), LinearJammer(1.0, 0.6, -0.2)])
        r = model.covariance
        assert np.abs(r - r.conj().T).max() < 1e-12 * np.abs(r).max()

    def test_fluctuating_needs_rng(self, elan11):
        with pytest.raises(NoiseError):
            NoiseModel(elan11, [FluctuatingWhite(1.0, 0.25)])


class TestFluctuatingPowers:
    def test_zero_fraction_constant(self, rng):
        powers = draw_fluctuating_powers(2.0, 0.0, 8, rng)
        np.testing.assert_array_equal(powers, 2.0)

    def test_uniform_moments(self, rng):
        draws = draw_fluctuating_powers(1.0, 0.25, 200_000, rng)
        assert draws.mean() == pytest.approx(1.0, abs=0.002)
        assert draws.var() == pytest.approx(0.25**2 / 3.0, rel=0.02)
        assert draws.min() >= 0.75 and draws.max() <= 1.25

    def test_invalid_fraction(self, rng):
        with pytest.raises(NoiseError):
            draw_fluctuating_powers(1.0, 1.0, 4, rng)

    def test_qbar_variance_adjustment_factor(self, elan21, rng):
        # with fluctuating powers the Q-bar variance gains a (1 + c^2/3)
        # factor relative to sigma^4 (N - M)
        from qres.detect import residual_noise_moments

        dirs = DirectionSet.from_u([-0.02, 0.03])
        n, m, c = 21, 2, 0.25
        acc = 0.0
        runs = 400
        for _ in range(runs):
            powers = draw_fluctuating_powers(1.0, c, n, rng)
            _, square_sum = residual_noise_moments(elan21, dirs, powers)
            acc += square_sum
        measured = acc / runs / (n - m)
        assert measured == pytest.approx(1.0 + c**2 / 3.0, rel=0.01)


class TestPerturbations:
    def test_identity_coupling(self, rng):
        z = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        out = apply_perturbation(CouplingMatrix(np.eye(6)), z)
        np.testing.assert_allclose(out, z)

    def test_vanishing_quantization_step(self, rng):
        z = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        out = apply_perturbation(Quantize(1e-9), z)
        np.testing.assert_allclose(out, z, atol=1e-9)

    def test_quantization_error_covariance(self, rng):
        # uniform rounding errors on re/im give diag(step^2 / 6)
        step = 0.25
        z = rng.standard_normal((200_000, 1)) * 5 + 1j * rng.standard_normal((200_000, 1)) * 5
        err = apply_perturbation(Quantize(step), z) - z
        measured = (err.conj() * err).mean().real
        assert measured == pytest.approx(step**2 / 6.0, rel=0.02)

    def test_clip_limits_components(self, rng):
        z = 10 * (rng.standard_normal(100) + 1j * rng.standard_normal(100))
        out = apply_perturbation(Clip(bq=1.0, rms=2.0), z)
        assert np.abs(out.real).max() <= 2.0 + 1e-12
        assert np.abs(out.imag).max() <= 2.0 + 1e-12

    def test_composition_order(self, rng):
        z = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        chain = [Quantize(0.5), Clip(bq=1.0, rms=0.5)]
        manual = apply_perturbation(chain[1], apply_perturbation(chain[0], z))
        np.testing.assert_allclose(apply_perturbation(chain, z), manual)

    def test_three_bit_quantize_and_clip_distortion_is_small(self, elan11, rng):
        # 3-bit quantization with clipping at one rms shifts the minimum of
        # the measured expected residual by well under a tenth beamwidth
        from qres import signals
        from qres.geometry import transfer_matrix
        from qres.qfunc import q_batch

        bw = elan11.beamwidth()
        dirs = DirectionSet.from_u(np.array([-bw / 4, bw / 4]))
        model = signals.from_snr("rayleigh", 12.5, 2)
        nm = NoiseModel(elan11, [White(1.0)])
        b_cov, _ = signals.amplitude_covariance(model)
        a_mat = transfer_matrix(elan11, dirs)
        rms = np.sqrt(np.real(np.diagonal(np.eye(11) + a_mat @ b_cov @ a_mat.conj().T)))
        # clip level sized for 3-bit quantization of the full range
        step = 2.0 * rms.mean() / 2**3
        chain = [Quantize(step), Clip(bq=1.0, rms=rms)]
        z = signals.synthesize(elan11, dirs, model, nm, 30_000, rng)
        zq = apply_perturbation(chain, z)
        offsets = np.linspace(-0.15, 0.15, 31) * bw
        means = [
            q_batch(zq, elan11, DirectionSet.from_u(dirs.u + off)).mean() for off in offsets
        ]
        shift = offsets[int(np.argmin(means))]
        assert abs(shift) <= 0.05 * bw


def test_mild_coupling_leaves_minimum_near_truth(elan21, rng):
    # element coupling distorts the measured expected residual only mildly
    # when the array is large; the minimum stays close to the targets
    from qres import signals
    from qres.qfunc import q_batch

    bw = elan21.beamwidth()
    dirs = DirectionSet.from_u(np.array([-bw / 4, bw / 4]))
    model = signals.from_snr("rayleigh", 12.0, 2)
    nm = NoiseModel(elan21, [White(1.0)])
    strength = 0.15
    raw = rng.standard_normal((21, 21)) + 1j * rng.standard_normal((21, 21))
    np.fill_diagonal(raw, 0.0)
    coupling = CouplingMatrix(np.eye(21) + strength * raw / np.abs(raw).max())
    z = signals.synthesize(elan21, dirs, model, nm, 20_000, rng)
    zc = apply_perturbation(coupling, z)
    offsets = np.linspace(-0.2, 0.2, 41) * bw
    means = [q_batch(zc, elan21, DirectionSet.from_u(dirs.u + off)).mean() for off in offsets]
    shift = offsets[int(np.argmin(means))]
    assert abs(shift) <= 0.05 * bw


def test_coupling_matrix_file(tmp_path, rng):
    mat = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    lines = []
    for row in mat:
        lines.append(" ".join(f"{c.real:.17g} {c.imag:.17g}" for c in row))
    path = tmp_path / "coupling.txt"
    path.write_text("\n".join(lines) + "\n")
    loaded = load_coupling_matrix(path)
    np.testing.assert_allclose(loaded, mat, rtol=1e-15)


def test_coupling_matrix_file_bad_count(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1.0 2.0 3.0\n")
    with pytest.raises(NoiseError):
        load_coupling_matrix(path)
