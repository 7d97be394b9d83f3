"""Monte Carlo experiment runner: config parsing, seeding, CSV/JSON output.

One YAML file describes one experiment; a ``sweep`` block expands into the
cross product of the listed parameter values.  Every trial draws its
random stream from a counter-based generator keyed by (seed, sweep point,
trial), so results are bit-identical regardless of worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import yaml

from . import detect, estimate, geometry, noise, signals
from .bounds import crlb_directions, crlb_directions_model4
from .detect import (
    DetectionForecast,
    GridEstimator,
    HermitianFormSpec,
    TestConfig,
    detection_probability,
    snr_from_range,
)
from .estimate import SAConfig, asymptotic_covariance
from .geometry import ArrayGeometry, DirectionSet
from .qfunc import expected_hessian_at_min


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the field path."""


_REQUIRED = object()


def _get(mapping, path, default=_REQUIRED, cast=None):
    node = mapping
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            if default is _REQUIRED:
                raise ConfigError(f"{path}: required field missing")
            return default
        node = node[key]
    if cast is not None:
        try:
            return cast(node)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return node


@dataclass
class ExperimentConfig:
    raw: dict
    scenario: str
    geom: ArrayGeometry
    center: tuple[float, float]
    target_offsets_bw: np.ndarray        # (M, 2) offsets from center in BW units
    signal_model: str
    snr_db: float
    signal_extra: dict
    noise_components: list
    perturbations: list
    estimator: object                     # SAConfig or GridEstimator
    test: TestConfig
    trials: int
    seed: int
    sweep: dict[str, list] = field(default_factory=dict)

    @property
    def m_true(self) -> int:
        return self.target_offsets_bw.shape[0]

    def true_directions(self) -> DirectionSet:
        bw = self.geom.beamwidth()
        arr = np.asarray(self.center) + self.target_offsets_bw * bw
        return DirectionSet(u=arr[:, 0], v=arr[:, 1]).canonical()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        for key, value in overrides.items():
            if key == "snr_db":
                raw.setdefault("signal", {})["snr_db"] = value
            elif key == "alpha":
                raw.setdefault("test", {})["alpha"] = value
            elif key == "separation_bw":
                raw.setdefault("targets", {})["separation_bw"] = value
                raw["targets"].pop("offsets_bw", None)
            else:
                raise ConfigError(f"sweep.{key}: unknown sweep parameter")
        raw.pop("sweep", None)
        return parse_config(raw)


def _parse_targets(raw, geom):
    targets = _get(raw, "targets", {})
    if "offsets_bw" in targets:
        offs = np.atleast_1d(np.asarray(targets["offsets_bw"], dtype=float))
        if offs.ndim == 1:
            offs = np.column_stack([offs, np.zeros_like(offs)])
        if offs.ndim != 2 or offs.shape[1] != 2:
            raise ConfigError("targets.offsets_bw: expected scalars or [u, v] pairs")
    elif "separation_bw" in targets:
        sep = float(targets["separation_bw"])
        offs = np.array([[-sep / 2.0, 0.0], [sep / 2.0, 0.0]])
    else:
        raise ConfigError("targets.offsets_bw: required field missing")
    return offs


def _parse_noise(raw):
    components = []
    for idx, item in enumerate(_get(raw, "noise", [{"type": "white", "sigma2": 1.0}])):
        kind = _get(item, "type")
        path = f"noise[{idx}]"
        if kind == "white":
            components.append(noise.White(float(item.get("sigma2", 1.0))))
        elif kind == "linear_jammer":
            components.append(noise.LinearJammer(
                power=float(_get(item, "power")), s=float(_get(item, "s")),
                u_bar=float(item.get("u_bar", 0.0))))
        elif kind == "planar_jammer":
            components.append(noise.PlanarJammer(
                power=float(_get(item, "power")), r=float(_get(item, "r")),
                u_bar=float(item.get("u_bar", 0.0)), v_bar=float(item.get("v_bar", 0.0))))
        elif kind == "fluctuating_white":
            components.append(noise.FluctuatingWhite(
                sigma2=float(item.get("sigma2", 1.0)), c=float(item.get("c", 0.25))))
        else:
            raise ConfigError(f"{path}.type: unknown noise component {kind!r}")
    return components


def _parse_perturbations(raw):
    out = []
    for idx, item in enumerate(_get(raw, "perturbations", [])):
        kind = _get(item, "type")
        if kind == "quantize":
            out.append(noise.Quantize(step=float(_get(item, "step"))))
        elif kind == "clip":
            out.append(("clip", float(_get(item, "bq"))))  # rms filled per scenario
        elif kind == "coupling":
            out.append(noise.CouplingMatrix(noise.load_coupling_matrix(_get(item, "file"))))
        else:
            raise ConfigError(f"perturbations[{idx}].type: unknown kind {kind!r}")
    return out


def _parse_estimator(raw):
    est = _get(raw, "estimator", {"type": "sa"})
    kind = est.get("type", "sa")
    if kind == "sa":
        return SAConfig(
            variant=est.get("variant", "hard_limit"),
            mu=est.get("mu"),
            delta=est.get("delta"),
            eta=est.get("eta"),
            iterations=int(est.get("iterations", 17)),
            epsilon=float(est.get("epsilon", 0.1)),
            spread=float(est.get("spread", 0.9)),
        )
    if kind == "grid":
        return GridEstimator(
            intervals=int(est.get("intervals", 6)),
            samples=int(est.get("samples", 1)),
        )
    raise ConfigError(f"estimator.type: unknown estimator {kind!r}")


def parse_config(source) -> ExperimentConfig:
    """Parse a YAML path/string/dict into a validated ExperimentConfig."""
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if "\n" not in text and Path(text).exists():
            text = Path(text).read_text()
        raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    array_spec = _get(raw, "array")
    try:
        if isinstance(array_spec, dict):
            geom = geometry.load_positions(_get(array_spec, "file"))
        else:
            geom = geometry.preset(str(array_spec))
    except geometry.GeometryError as exc:
        raise ConfigError(f"array: {exc}") from None
    center = tuple(float(c) for c in _get(raw, "center", [0.0, 0.0]))
    if len(center) != 2:
        raise ConfigError("center: expected [u, v]")
    offsets = _parse_targets(raw, geom)
    sig = _get(raw, "signal", {})
    model = sig.get("model", "rayleigh")
    if model not in (signals.DETERMINISTIC, signals.PHASE_FLUCT, signals.FIXED_AMP, signals.RAYLEIGH):
        raise ConfigError(f"signal.model: unknown model {model!r}")
    extra = {}
    if "mean_phase_deg" in sig:
        extra["mean_phase"] = np.deg2rad(np.asarray(sig["mean_phase_deg"], dtype=float))
    if "phase_std_deg" in sig:
        std = np.asarray(sig["phase_std_deg"], dtype=float)
        extra["phase_std"] = np.deg2rad(np.broadcast_to(std, (offsets.shape[0],)).copy())
    test_raw = _get(raw, "test", {})
    try:
        test = TestConfig(
            alpha=float(test_raw.get("alpha", 0.05)),
            sigma2=float(test_raw.get("sigma2", 1.0)),
            snapshots=int(test_raw.get("K", 1)),
            m_max=int(test_raw.get("m_max", 3)),
            mode=test_raw.get("mode", "chi2"),
        )
    except ValueError as exc:
        raise ConfigError(f"test: {exc}") from None
    sweep = _get(raw, "sweep", {})
    if sweep and not all(isinstance(v, list) for v in sweep.values()):
        raise ConfigError("sweep: every entry must be a list of values")
    trials = int(_get(raw, "trials", 1))
    if trials < 1:
        raise ConfigError("trials: must be >= 1")
    return ExperimentConfig(
        raw=raw,
        scenario=str(_get(raw, "scenario", "experiment")),
        geom=geom,
        center=center,
        target_offsets_bw=offsets,
        signal_model=model,
        snr_db=float(sig.get("snr_db", 10.0)),
        signal_extra=extra,
        noise_components=_parse_noise(raw),
        perturbations=_parse_perturbations(raw),
        estimator=_parse_estimator(raw),
        test=test,
        trials=trials,
        seed=int(_get(raw, "seed", 0)),
        sweep={k: list(v) for k, v in sweep.items()},
    )


# ---------------------------------------------------------------------------
# trial execution


def _trial_rng(seed: int, point: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(point, trial))
    return np.random.Generator(np.random.Philox(ss))


def _build_perturbations(config: ExperimentConfig, noise_model, dirs_true, sig_model):
    """Resolve deferred clip rms from the theoretical snapshot covariance."""
    out = []
    b_cov, _ = signals.amplitude_covariance(sig_model)
    a_mat = geometry.transfer_matrix(config.geom, dirs_true)
    cov_diag = np.real(np.diagonal(noise_model.covariance + a_mat @ b_cov @ a_mat.conj().T))
    for item in config.perturbations:
        if isinstance(item, tuple) and item[0] == "clip":
            out.append(noise.Clip(bq=item[1], rms=np.sqrt(cov_diag)))
        else:
            out.append(item)
    return out


def run_trial(config: ExperimentConfig, point: int, trial: int) -> list[dict]:
    rng = _trial_rng(config.seed, point, trial)
    dirs_true = config.true_directions()
    sig_model = signals.from_snr(
        config.signal_model, config.snr_db, config.m_true, **config.signal_extra
    )
    noise_model = noise.NoiseModel(config.geom, config.noise_components, rng=rng)
    perturbations = _build_perturbations(config, noise_model, dirs_true, sig_model)

    def source(count):
        block = signals.synthesize(config.geom, dirs_true, sig_model, noise_model, count, rng)
        if perturbations:
            block = noise.apply_perturbation(perturbations, block)
        return block

    outcome = detect.multihypothesis_test(
        source, config.geom, config.center, config.test, config.estimator, rng
    )
    rows = []
    m_max = config.test.m_max
    for stage in outcome.stages:
        row = {
            "point": point,
            "trial": trial,
            "stage_M": stage.m,
            "accepted": int(stage.accepted),
            "q_bar": f"{stage.q_bar:.12g}",
            "eta": f"{stage.eta:.12g}",
            "iters": stage.iterations,
            "proj_events": stage.projection_events,
        }
        for j in range(m_max):
            row[f"u_hat_{j + 1}"] = (
                f"{stage.directions.u[j]:.12g}" if j < stage.m else ""
            )
            row[f"v_hat_{j + 1}"] = (
                f"{stage.directions.v[j]:.12g}" if j < stage.m else ""
            )
        rows.append(row)
    return rows


def _run_trial_batch(raw_config, point, overrides, trials):
    config = parse_config(raw_config)
    if overrides:
        config = config.with_overrides(overrides)
    rows = []
    errors = []
    for trial in trials:
        try:
            rows.extend(run_trial(config, point, trial))
        except Exception as exc:  # noqa: BLE001 - per-trial failures are recorded
            errors.append({"point": point, "trial": trial, "error": str(exc)})
    return rows, errors


def _wilson_interval(successes: int, n: int) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    z = 1.959963984540054
    p = successes / n
    denom = 1.0 + z**2 / n
    mid = (p + z**2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return max(mid - half, 0.0), min(mid + half, 1.0)


def _summarize_point(config: ExperimentConfig, rows: list[dict], errors: list[dict]) -> dict:
    m_true = config.m_true
    dirs_true = config.true_directions()
    bw = config.geom.beamwidth()
    by_trial: dict[int, list[dict]] = {}
    for row in rows:
        by_trial.setdefault(row["trial"], []).append(row)
    n_trials = len(by_trial)
    pd_count = 0
    pf1_count = 0
    dev_bw = []
    for stages in by_trial.values():
        accepted = [s for s in stages if s["accepted"]]
        m_hat = accepted[0]["stage_M"] if accepted else config.test.m_max + 1
        if m_hat == m_true:
            pd_count += 1
            stage = accepted[0]
            u_hat = np.array([float(stage[f"u_hat_{j + 1}"]) for j in range(m_true)])
            dev_bw.extend((np.sort(u_hat) - np.sort(dirs_true.u)) / bw)
        elif m_hat > m_true:
            pf1_count += 1
    pd = pd_count / n_trials if n_trials else 0.0
    pf1 = pf1_count / n_trials if n_trials else 0.0
    dev = np.asarray(dev_bw)
    return {
        "trials": n_trials,
        "pd": pd,
        "pd_ci95": _wilson_interval(pd_count, n_trials),
        "pf1": pf1,
        "pf1_ci95": _wilson_interval(pf1_count, n_trials),
        "direction_std_bw": float(np.sqrt(np.mean(dev**2))) if dev.size else None,
        "errors": len(errors),
    }


@dataclass
class ExperimentResult:
    rows: list[dict]
    summary: dict
    csv_path: Path | None = None
    json_path: Path | None = None


def _sweep_points(config: ExperimentConfig):
    if not config.sweep:
        return [(0, {})]
    keys = sorted(config.sweep)
    values = [config.sweep[k] for k in keys]
    return [
        (idx, dict(zip(keys, combo)))
        for idx, combo in enumerate(product(*values))
    ]


CSV_FIELDS_FIXED = ["point", "trial", "stage_M", "accepted", "q_bar", "eta"]


def _csv_fields(config: ExperimentConfig) -> list[str]:
    m_max = config.test.m_max
    return (
        CSV_FIELDS_FIXED
        + [f"u_hat_{j + 1}" for j in range(m_max)]
        + [f"v_hat_{j + 1}" for j in range(m_max)]
        + ["iters", "proj_events"]
    )


def run_experiment(config: ExperimentConfig, threads: int = 1, out_dir=None) -> ExperimentResult:
    """Execute all sweep points and trials; aggregation is order-independent."""
    points = _sweep_points(config)
    all_rows: list[dict] = []
    summary: dict = {"scenario": config.scenario, "seed": config.seed, "points": {}}
    chunk = 32
    for point_idx, overrides in points:
        point_config = config.with_overrides(overrides) if overrides else config
        batches = [
            (config.raw, point_idx, overrides, list(range(start, min(start + chunk, config.trials))))
            for start in range(0, config.trials, chunk)
        ]
        rows: list[dict] = []
        errors: list[dict] = []
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for batch_rows, batch_errors in pool.map(_run_trial_batch_star, batches):
                    rows.extend(batch_rows)
                    errors.extend(batch_errors)
        else:
            for batch in batches:
                batch_rows, batch_errors = _run_trial_batch(*batch)
                rows.extend(batch_rows)
                errors.extend(batch_errors)
        rows.sort(key=lambda r: (r["trial"], r["stage_M"]))
        all_rows.extend(rows)
        summary["points"][str(point_idx)] = {
            "overrides": overrides,
            **_summarize_point(point_config, rows, errors),
        }
    result = ExperimentResult(rows=all_rows, summary=summary)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.csv_path = out_dir / f"{config.scenario}_trials.csv"
        result.json_path = out_dir / f"{config.scenario}_summary.json"
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=_csv_fields(config), lineterminator="\n")
        writer.writeheader()
        writer.writerows(all_rows)
        result.csv_path.write_text(buffer.getvalue())
        result.json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def _run_trial_batch_star(args):
    return _run_trial_batch(*args)


# ---------------------------------------------------------------------------
# closed-form theory tables


def _scenario_b_cov(config: ExperimentConfig, snr_db: float) -> np.ndarray:
    model = signals.from_snr(config.signal_model, snr_db, config.m_true, **config.signal_extra)
    b_cov, _ = signals.amplitude_covariance(model)
    return b_cov


def theory_tables(config: ExperimentConfig, out_dir) -> dict[str, Path]:
    """Closed-form curves as CSV files (no simulation involved).

    Emits detection probability against SNR, separation and relative range,
    CRLB curves, and the asymptotic dispersion of the iteration for step
    factors 0.6..1.4 of the optimal step.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geom = config.geom
    bw = geom.beamwidth()
    if config.m_true != 2:
        raise detect.CoverageError("theory tables cover the two-target scenario")
    alphas = config.sweep.get("alpha", [config.test.alpha])
    ks = [1, 2, 3] if config.test.snapshots == 1 else [config.test.snapshots]
    paths = {}

    def forecast(sep_bw, snr_db, alpha, k) -> DetectionForecast:
        cfg = TestConfig(alpha=alpha, sigma2=config.test.sigma2, snapshots=k,
                         m_max=config.test.m_max, mode="normal")
        half = sep_bw * bw / 2.0
        dirs = DirectionSet.from_u(np.array([config.center[0] - half, config.center[0] + half]))
        return detection_probability(geom, dirs, _scenario_b_cov(config, snr_db), cfg)

    sep_default = float(
        (config.target_offsets_bw[:, 0].max() - config.target_offsets_bw[:, 0].min())
    )

    path = out_dir / "pd_vs_snr.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["separation_bw", "snr_db", "alpha", "K", "beta", "pd"])
        for snr_db in config.sweep.get("snr_db", list(np.arange(0.0, 15.5, 1.0))):
            for alpha in alphas:
                for k in ks:
                    fc = forecast(sep_default, snr_db, alpha, k)
                    writer.writerow([sep_default, snr_db, alpha, k,
                                     f"{fc.stages[0].beta:.8g}", f"{fc.probability:.8g}"])
    paths["pd_vs_snr"] = path

    path = out_dir / "pd_vs_separation.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["separation_bw", "snr_db", "alpha", "K", "beta", "pd"])
        for sep in config.sweep.get("separation_bw", list(np.arange(0.2, 1.21, 0.05))):
            for alpha in alphas:
                for k in ks:
                    fc = forecast(sep, config.snr_db, alpha, k)
                    writer.writerow([sep, config.snr_db, alpha, k,
                                     f"{fc.stages[0].beta:.8g}", f"{fc.probability:.8g}"])
    paths["pd_vs_separation"] = path

    path = out_dir / "pd_vs_range.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["separation_bw", "r_over_r0", "snr_db_per_element", "alpha", "K", "pd"])
        for r_rel in np.arange(0.25, 1.01, 0.05):
            snr = snr_from_range(float(r_rel), geom.n_elements)
            snr_db = 10.0 * math.log10(snr)
            for alpha in alphas:
                for k in ks:
                    fc = forecast(sep_default, snr_db, alpha, k)
                    writer.writerow([sep_default, f"{r_rel:.2f}", f"{snr_db:.4f}",
                                     alpha, k, f"{fc.probability:.8g}"])
    paths["pd_vs_range"] = path

    path = out_dir / "crlb_vs_separation.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["separation_bw", "snr_db", "dphi_deg", "model", "sqrt_crlb_bw"])
        for sep in np.arange(0.2, 1.21, 0.05):
            half = sep * bw / 2.0
            dirs = DirectionSet.from_u(np.array([-half, half]))
            for snr_db in config.sweep.get("snr_db", [config.snr_db]):
                amp = math.sqrt(10.0 ** (snr_db / 10.0) / 2.0)
                for dphi in (0.0, 90.0, 180.0):
                    b = np.array([amp, amp * np.exp(1j * math.radians(dphi))])
                    try:
                        var = crlb_directions(geom, dirs, b).max()
                        writer.writerow([f"{sep:.2f}", snr_db, dphi, "deterministic",
                                         f"{math.sqrt(var) / bw:.8g}"])
                    except Exception:
                        writer.writerow([f"{sep:.2f}", snr_db, dphi, "deterministic", "inf"])
                powers = np.full(2, 10.0 ** (snr_db / 10.0) / 2.0)
                var4 = crlb_directions_model4(geom, dirs, powers).max()
                writer.writerow([f"{sep:.2f}", snr_db, "", "rayleigh",
                                 f"{math.sqrt(var4) / bw:.8g}"])
    paths["crlb_vs_separation"] = path

    path = out_dir / "sa_dispersion.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["separation_bw", "mu_factor", "avg_dispersion", "crlb_avg"])
        amp = math.sqrt(10.0 ** (config.snr_db / 10.0) / 2.0)
        for sep in np.arange(0.3, 1.21, 0.05):
            half = sep * bw / 2.0
            dirs = DirectionSet.from_u(np.array([-half, half]))
            b = np.array([amp, amp * 1j])  # quadrature phasing, the well-conditioned case
            lam = np.linalg.eigvalsh(expected_hessian_at_min(geom, dirs, b))
            crlb_avg = float(np.mean(1.0 / lam))
            for factor in (0.6, 0.8, 1.0, 1.2, 1.4):
                mu = factor / lam.min()
                try:
                    rep = asymptotic_covariance(geom, dirs, b, mu)
                    writer.writerow([f"{sep:.2f}", factor,
                                     f"{rep.mean_dispersion:.8g}", f"{crlb_avg:.8g}"])
                except estimate.StepTooSmall:
                    writer.writerow([f"{sep:.2f}", factor, "inf", f"{crlb_avg:.8g}"])
    paths["sa_dispersion"] = path
    return paths
