"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest -s`` to see them inline)."""

import math
import time

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid, quad
from scipy.stats import kstest

from qres import _kernels
from qres.bounds import fisher_deterministic
from qres.detect import (
    HermitianFormSpec,
    TestConfig,
    detection_probability,
    hermitian_form_density,
    hermitian_form_sampler,
    multihypothesis_test,
    threshold,
    type2_error,
    type2_error_quadrature,
)
from qres.estimate import (
    SAConfig,
    asymptotic_covariance,
    cost_model,
    GridTable,
    linear_grid,
    planar_triangular_grid,
    stochastic_approximation,
)
from qres.geometry import DirectionSet, preset, transfer_matrix
from qres.noise import NoiseModel, White
from qres.qfunc import (
    expected_hessian_at_min,
    projector,
    q_batch,
    q_from_matrix,
    q_value,
    var_q,
)
from qres.signals import SignalModel, amplitude_covariance, from_snr, synthesize

from conftest import random_directions, random_geometry, random_snapshot


def _report(num, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {num:2d} {status}: {detail}")
    assert ok, f"criterion {num}: {detail}"


def test_criterion_01_projector_identities():
    rng = np.random.default_rng(101)
    start = time.time()
    worst = 0.0
    for _ in range(200):
        geom = random_geometry(rng)
        m = int(rng.integers(1, 4))
        dirs = random_directions(rng, geom, m)
        gamma = projector(geom, dirs)
        a_mat = transfer_matrix(geom, dirs)
        n = geom.n_elements
        worst = max(
            worst,
            np.abs(gamma @ gamma - gamma).max(),
            np.abs(gamma - gamma.conj().T).max(),
            np.abs(gamma @ a_mat).max(),
            abs(np.trace(gamma).real - (n - m)),
        )
    # permutation symmetry and half-wavelength periodicity
    elan11 = preset("elan_11_l")
    sym_err = 0.0
    for _ in range(20):
        z = random_snapshot(rng, 11)
        u = np.sort(rng.uniform(-0.4, 0.4, 3))
        if np.diff(u).min() < 0.05:
            continue
        q_a = q_value(z, elan11, DirectionSet.from_u(u)).q
        q_b = q_value(z, elan11, DirectionSet.from_u(u[[2, 0, 1]])).q
        sym_err = max(sym_err, abs(q_a - q_b) / q_a)
        a0 = _kernels.steer(elan11.x, elan11.y, u, np.zeros(3))
        a2 = _kernels.steer(elan11.x, elan11.y, u + 2.0, np.zeros(3))
        sym_err = max(sym_err, abs(q_from_matrix(a2, z)[0] - q_a) / q_a)
    # element-pattern invariance
    pat_err = 0.0
    for _ in range(20):
        geom = random_geometry(rng)
        dirs = random_directions(rng, geom, 2)
        a_mat = transfer_matrix(geom, dirs)
        z = random_snapshot(rng, geom.n_elements)
        f = rng.uniform(0.5, 1.5, 2) * np.exp(1j * rng.uniform(0, 2 * np.pi, 2))
        q0 = q_from_matrix(a_mat, z)[0]
        q1 = q_from_matrix(a_mat * f, z)[0]
        pat_err = max(pat_err, abs(q1 - q0) / max(q0, 1e-12))
    elapsed = time.time() - start
    ok = worst < 1e-10 and sym_err < 1e-10 and pat_err < 1e-10 and elapsed < 10.0
    _report(1, ok, f"identities {worst:.2e}, symmetry/period {sym_err:.2e}, "
                   f"pattern {pat_err:.2e}, {elapsed:.1f}s")


def test_criterion_02_gradient_against_differences():
    rng = np.random.default_rng(202)
    start = time.time()
    worst = 0.0
    from qres.qfunc import q_gradient

    for case in range(100):
        geom = random_geometry(rng, planar=bool(case % 2))
        dirs = random_directions(rng, geom, 2)
        z = random_snapshot(rng, geom.n_elements)
        ev = q_gradient(z, geom, dirs, with_beams=False)
        h = 1e-5 * geom.beamwidth()
        n_par = ev.gradient.shape[0]
        scale = max(np.abs(ev.gradient).max(), 1e-9)
        for p in range(n_par):
            t = p % 2
            du = np.zeros(2)
            dv = np.zeros(2)
            (du if p < 2 else dv)[t] = h
            qp = q_value(z, geom, DirectionSet(u=dirs.u + du, v=dirs.v + dv)).q
            qm = q_value(z, geom, DirectionSet(u=dirs.u - du, v=dirs.v - dv)).q
            worst = max(worst, abs(ev.gradient[p] - (qp - qm) / (2 * h)) / scale)
    elapsed = time.time() - start
    ok = worst < 1e-5 and elapsed < 10.0
    _report(2, ok, f"max relative gradient error {worst:.2e} over 100 cases, {elapsed:.1f}s")


def test_criterion_03_fisher_curvature_identity():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(50):
        geom = random_geometry(rng)
        dirs = random_directions(rng, geom, 2)
        mag = rng.uniform(0.7, 2.0, 2)
        b = mag * np.exp(1j * rng.uniform(0, 2 * np.pi, 2))
        blocks = fisher_deterministic(geom, dirs, b)
        om = blocks.index_map["omega"]
        inv = np.linalg.inv(blocks.matrix)[np.ix_(om, om)]
        curv_inv = np.linalg.inv(expected_hessian_at_min(geom, dirs, b))
        worst = max(worst, np.linalg.norm(inv - curv_inv) / np.linalg.norm(curv_inv))
    ok = worst < 1e-8
    _report(3, ok, f"max Frobenius relative error {worst:.2e} over 50 two-target configs")


def test_criterion_04_q_moment_formulas():
    rng = np.random.default_rng(404)
    geom = preset("elan_11_l")
    dirs_ex = DirectionSet.from_u([-0.05, 0.07])
    probe = DirectionSet.from_u([-0.09, 0.04])
    model = SignalModel("rayleigh", power=[2.0, 1.0])
    nm = NoiseModel(geom, [White(1.0)])
    trials = 100_000
    snaps = synthesize(geom, dirs_ex, model, nm, trials, rng)
    values = q_batch(snaps, geom, probe)
    a_mat = transfer_matrix(geom, dirs_ex)
    b_cov, _ = amplitude_covariance(model)
    r_tilde = np.eye(11) + a_mat @ b_cov @ a_mat.conj().T
    gamma = projector(geom, probe)
    mean_th = float(np.trace(gamma @ r_tilde).real)
    var_th = var_q(geom, probe, r_tilde)
    mean_se = values.std() / math.sqrt(trials)
    var_se = values.var() * math.sqrt(2.0 / trials) * 2.0  # inflated for kurtosis
    mean_ok = abs(values.mean() - mean_th) <= 5 * mean_se
    var_ok = abs(values.var() - var_th) <= 5 * var_se
    # variance bounds on every tested configuration
    bounds_ok = True
    for _ in range(25):
        g2 = random_geometry(rng)
        d2 = random_directions(rng, g2, 2)
        n = g2.n_elements
        root = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        r_mat = root @ root.conj().T / n + 0.05 * np.eye(n)
        mean = np.trace(projector(g2, d2) @ r_mat).real
        var = var_q(g2, d2, r_mat)
        bounds_ok &= mean**2 / n - 1e-9 <= var <= mean**2 + 1e-9
    ok = mean_ok and var_ok and bounds_ok
    _report(4, ok, f"mean {values.mean():.4f} vs {mean_th:.4f}, "
                   f"var {values.var():.3f} vs {var_th:.3f}, bounds hold: {bounds_ok}")


def test_criterion_05_density_and_beta_chain():
    cases = [  # every implemented (order, K) family
        ((2.0,), 1), ((2.0,), 2), ((2.0,), 3), ((2.0,), 5),
        ((1.0, 0.4), 1), ((1.0, 0.4), 2), ((1.0, 0.4), 3),
        ((1.0, 0.5, 0.2), 1),
    ]
    mass_err = 0.0
    ks_min = 1.0
    for lam, k in cases:
        spec = HermitianFormSpec(eigenvalues=np.array(lam), snapshots=k)
        upper = 100.0 * max(lam) * k
        mass, _ = quad(lambda x: hermitian_form_density(spec, x), 0, upper, limit=500)
        mass_err = max(mass_err, abs(mass - 1.0))
        rng = np.random.default_rng((k, len(lam), int(sum(lam) * 10)))
        samples = hermitian_form_sampler(spec, rng, 100_000)
        xs = np.linspace(0.0, samples.max() * 1.2, 20_000)
        cdf = cumulative_trapezoid(hermitian_form_density(spec, xs), xs, initial=0.0)
        ks = kstest(samples, lambda t: np.interp(t, xs, cdf))
        ks_min = min(ks_min, ks.pvalue)
    beta_err = 0.0
    rng = np.random.default_rng(505)
    for k in (1, 2, 3):
        cfg = TestConfig(alpha=0.05, snapshots=k, mode="normal")
        for order in (1, 2):
            lam = np.sort(rng.uniform(0.3, 5.0, order))[::-1]
            if order == 2 and lam[0] - lam[1] < 0.2:
                lam[0] += 0.5
            spec = HermitianFormSpec(eigenvalues=lam, snapshots=k)
            closed = type2_error(spec, cfg, 21, 1)
            numeric = type2_error_quadrature(spec, cfg, 21, 1)
            beta_err = max(beta_err, abs(closed - numeric))
    cfg1 = TestConfig(alpha=0.05, snapshots=1, mode="normal")
    strong = type2_error(HermitianFormSpec(np.array([1e7]), 1), cfg1, 21, 1)
    vanish = type2_error(HermitianFormSpec(np.array([1e-9]), 1), cfg1, 21, 1)
    limits_ok = strong < 1e-4 and abs(vanish - 0.95) < 1e-6
    ok = mass_err < 1e-8 and ks_min > 0.01 and beta_err < 1e-6 and limits_ok
    _report(5, ok, f"mass err {mass_err:.1e}, min KS p {ks_min:.3f}, "
                   f"beta closed-vs-quadrature {beta_err:.1e}, limits ok {limits_ok}")


def test_criterion_06_threshold_calibration():
    geom = preset("elan_21_l")
    trials = 5000
    worst_sigma = 0.0
    detail = []
    for mode, alpha in (("chi2", 0.05), ("normal", 0.10)):
        se = math.sqrt(alpha * (1 - alpha) / trials)
        for m in (1, 2):
            dirs = DirectionSet.from_u(np.linspace(-0.04, 0.04, m))
            model = from_snr("rayleigh", 5.0, m)
            nm = NoiseModel(geom, [White(1.0)])
            for k in (1, 2, 3):
                cfg = TestConfig(alpha=alpha, snapshots=k, mode=mode)
                eta = threshold(cfg, 21, m)
                rng = np.random.default_rng((mode == "chi2", m, k, 606))
                snaps = synthesize(geom, dirs, model, nm, trials * k, rng)
                stat = q_batch(snaps, geom, dirs).reshape(trials, k).mean(axis=1)
                rate = float((stat > eta).mean())
                worst_sigma = max(worst_sigma, abs(rate - alpha) / se)
                detail.append(f"{mode}/M{m}/K{k}:{rate:.3f}")
    ok = worst_sigma <= 3.0
    _report(6, ok, f"max |rate-alpha| = {worst_sigma:.2f} binomial SE over 12 points")


def test_criterion_07_detection_curve_reproduction():
    # Fig 7-1 scenario with exact stage parameters.  The Monte Carlo
    # estimate uses 10^4 trials (common random numbers across alpha) and
    # must stay inside the 95% binomial band of a 500-trial study around
    # the closed-form probability.
    geom = preset("elan_21_l")
    bw = geom.beamwidth()
    sep = 0.55 * bw
    dirs = DirectionSet.from_u([-sep / 2, sep / 2])
    mid = DirectionSet.from_u([0.0])
    trials, band_trials, k = 10_000, 500, 1
    worst = 0.0
    for snr in (3.0, 5.0, 7.0):
        model = from_snr("rayleigh", snr, 2)
        nm = NoiseModel(geom, [White(1.0)])
        b_cov, _ = amplitude_covariance(model)
        rng = np.random.default_rng((707, int(snr * 10)))
        s1 = synthesize(geom, dirs, model, nm, trials * k, rng).reshape(trials, k, 21)
        s2 = synthesize(geom, dirs, model, nm, trials * k, rng).reshape(trials, k, 21)
        q1 = q_batch(s1.reshape(-1, 21), geom, mid).reshape(trials, k).mean(axis=1)
        q2 = q_batch(s2.reshape(-1, 21), geom, dirs).reshape(trials, k).mean(axis=1)
        for alpha in (0.02, 0.04, 0.06, 0.08, 0.10):
            cfg = TestConfig(alpha=alpha, snapshots=k, mode="normal")
            theory = detection_probability(geom, dirs, b_cov, cfg).probability
            pd_mc = float(
                ((q1 > threshold(cfg, 21, 1)) & (q2 <= threshold(cfg, 21, 2))).mean()
            )
            band = 1.96 * math.sqrt(theory * (1 - theory) / band_trials)
            worst = max(worst, abs(pd_mc - theory) / band)
    ok = worst <= 1.0
    _report(7, ok, f"max |MC-theory| = {worst:.2f} of the 500-trial 95% band")


def test_criterion_08_end_to_end_pipeline():
    # full pipeline at the SNR where the closed form predicts 95%
    # detection (alpha = 0.02, K = 3, separation 0.5 BW)
    geom = preset("elan_21_l")
    bw = geom.beamwidth()
    sep = 0.5 * bw
    dirs = DirectionSet.from_u([-sep / 2, sep / 2])
    snr_db = 8.51
    cfg = TestConfig(alpha=0.02, snapshots=3, m_max=3, mode="normal")
    model = from_snr("rayleigh", snr_db, 2)
    estimator = SAConfig(variant="hard_limit", iterations=17)
    trials = 1000
    m_hats = np.empty(trials, dtype=int)
    dev = []
    for t in range(trials):
        rng = np.random.default_rng((808, t))
        nm = NoiseModel(geom, [White(1.0)])

        def source(count):
            return synthesize(geom, dirs, model, nm, count, rng)

        outcome = multihypothesis_test(source, geom, 0.0, cfg, estimator, rng)
        m_hats[t] = outcome.m_hat
        if outcome.m_hat == 2:
            stage = outcome.accepted_stage
            dev.extend(np.sort(stage.directions.u) - np.sort(dirs.u))
    pd = float((m_hats == 2).mean())
    pf1 = float((m_hats > 2).mean())
    std_bw = float(np.sqrt(np.mean(np.square(dev)))) / bw
    pf1_bound = 0.02 + 3 * math.sqrt(0.02 * 0.98 / trials)
    ok = abs(pd - 0.95) <= 0.05 and std_bw <= 0.06 and pf1 <= pf1_bound
    _report(8, ok, f"PD={pd:.3f} (target 0.95+-0.05), std={std_bw:.4f} BW (<=0.06), "
                   f"PF1={pf1:.4f} (<= {pf1_bound:.4f})")


def test_criterion_09_sa_asymptotics():
    geom = preset("elan_11_l")
    bw = geom.beamwidth()
    sep = 0.5 * bw
    dirs = DirectionSet.from_u([-sep / 2, sep / 2])
    amp = math.sqrt(10.0**1.4 / 2.0)
    phases = np.array([0.0, np.pi / 3.0])  # distinct curvature eigenvalues
    b = amp * np.exp(1j * phases)
    model = SignalModel("deterministic", magnitude=[amp, amp], mean_phase=phases)
    nm = NoiseModel(geom, [White(1.0)])
    lam = np.linalg.eigvalsh(expected_hessian_at_min(geom, dirs, b))
    mu = 1.0 / lam.min()
    report = asymptotic_covariance(geom, dirs, b, mu)
    runs, iters = 200, 2000
    finals = np.empty((runs, 2))
    for t in range(runs):
        rng = np.random.default_rng((909, t))
        snaps = synthesize(geom, dirs, model, nm, iters, rng)
        cfg = SAConfig(variant="plain", mu=mu, iterations=iters, spread=0.25)
        trace = stochastic_approximation(snaps, geom, 0.0, 2, cfg)
        finals[t] = np.sort(trace.estimate.u) - np.sort(dirs.u)
    finals *= math.sqrt(iters)
    emp = finals.T @ finals / runs
    ratios = np.diagonal(emp) / np.diagonal(report.covariance)
    within = np.all(np.abs(ratios - 1.0) <= 0.25)
    # dispersion-versus-bound ordering across separations
    ordering = True
    for sep_bw in np.arange(0.3, 1.01, 0.1):
        d = DirectionSet.from_u([-sep_bw * bw / 2, sep_bw * bw / 2])
        b_quad = np.array([amp, amp * 1j])
        lam_s = np.linalg.eigvalsh(expected_hessian_at_min(geom, d, b_quad))
        rep = asymptotic_covariance(geom, d, b_quad, 1.0 / lam_s.min())
        crlb_avg = float(np.mean(1.0 / lam_s))
        ordering &= rep.mean_dispersion >= crlb_avg - 1e-12
    ok = within and ordering
    _report(9, ok, f"empirical/theory variance ratios {ratios[0]:.3f}, {ratios[1]:.3f} "
                   f"(within 25%), dispersion >= bound: {ordering}")


def test_criterion_10_cost_model():
    rep = cost_model(2, "linear", iterations=15, grid_points=5, samples=3)
    expr_ok = (
        rep.sa_multiplications == 12 * 15
        and rep.sa_roots == 15
        and rep.grid_multiplications == 180
    )
    cross_ok = (3, 15) in rep.crossovers and (4, 20) in rep.crossovers
    rep_pl = cost_model(2, "planar", iterations=10, grid_points=19, samples=2)
    planar_ok = rep_pl.sa_multiplications == 15 * 10 and rep_pl.grid_multiplications == 2 * 171 * 6
    elan11 = preset("elan_11_l")
    elan25 = preset("elan_25")
    count_linear = GridTable(elan11, linear_grid(elan11, 0.0, 6), 2).n_evaluations
    count_planar = GridTable(
        elan25, planar_triangular_grid(elan25, (0.0, 0.0), 6), 2
    ).n_evaluations
    counts_ok = count_linear == 21 and count_planar == 171
    ok = expr_ok and cross_ok and planar_ok and counts_ok
    _report(10, ok, f"expressions {expr_ok}, crossovers {cross_ok}, "
                    f"grid counts {count_linear}/{count_planar}")
