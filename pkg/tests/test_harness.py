import csv
import subprocess
import sys

import numpy as np
import pytest

from qres.cli import main as cli_main
from qres.harness import ConfigError, parse_config, run_experiment, theory_tables

BASE_CONFIG = """
scenario: smoke
array: elan_11_l
center: [0.0, 0.0]
targets:
  separation_bw: 0.5
signal:
  model: rayleigh
  snr_db: 12.0
noise:
  - {type: white, sigma2: 1.0}
estimator:
  type: sa
  variant: hard_limit
  iterations: 9
test:
  alpha: 0.1
  K: 1
  m_max: 2
  mode: chi2
trials: 6
seed: 424242
"""


class TestConfigParsing:
    def test_minimal_config(self):
        config = parse_config(BASE_CONFIG)
        assert config.geom.n_elements == 11
        assert config.m_true == 2
        assert config.test.alpha == 0.1
        dirs = config.true_directions()
        bw = config.geom.beamwidth()
        assert dirs.u[1] - dirs.u[0] == pytest.approx(0.5 * bw)

    def test_missing_required_field_names_path(self):
        with pytest.raises(ConfigError, match="targets.offsets_bw"):
            parse_config("array: elan_11_l\ntrials: 1\n")

    def test_unknown_noise_component(self):
        bad = BASE_CONFIG + "\n"
        bad = bad.replace("{type: white, sigma2: 1.0}", "{type: purple}")
        with pytest.raises(ConfigError, match="noise"):
            parse_config(bad)

    def test_unknown_array(self):
        with pytest.raises(ConfigError, match="array"):
            parse_config(BASE_CONFIG.replace("elan_11_l", "elan_unknown"))

    def test_sweep_must_hold_lists(self):
        bad = BASE_CONFIG + "sweep:\n  snr_db: 3\n"
        with pytest.raises(ConfigError, match="sweep"):
            parse_config(bad)

    def test_planar_offsets(self):
        cfg = BASE_CONFIG.replace(
            "  separation_bw: 0.5", "  offsets_bw: [[-0.2, 0.1], [0.2, -0.1]]"
        ).replace("elan_11_l", "elan_25")
        config = parse_config(cfg)
        assert config.geom.kind == "planar"
        assert config.target_offsets_bw.shape == (2, 2)


class TestRunExperiment:
    def test_deterministic_output_bytes(self, tmp_path):
        config = parse_config(BASE_CONFIG)
        res1 = run_experiment(config, out_dir=tmp_path / "a")
        res2 = run_experiment(config, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "smoke_trials.csv").read_bytes() == (
            tmp_path / "b" / "smoke_trials.csv"
        ).read_bytes()
        assert res1.summary == res2.summary

    def test_parallel_matches_serial(self, tmp_path):
        config = parse_config(BASE_CONFIG)
        serial = run_experiment(config, threads=1, out_dir=tmp_path / "s")
        parallel = run_experiment(config, threads=2, out_dir=tmp_path / "p")
        assert (tmp_path / "s" / "smoke_trials.csv").read_bytes() == (
            tmp_path / "p" / "smoke_trials.csv"
        ).read_bytes()
        assert serial.summary == parallel.summary

    def test_summary_recomputable_from_rows(self, tmp_path):
        config = parse_config(BASE_CONFIG)
        result = run_experiment(config, out_dir=tmp_path)
        with (tmp_path / "smoke_trials.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        by_trial = {}
        for row in rows:
            by_trial.setdefault(row["trial"], []).append(row)
        pd_count = 0
        for stages in by_trial.values():
            accepted = [s for s in stages if s["accepted"] == "1"]
            m_hat = int(accepted[0]["stage_M"]) if accepted else config.test.m_max + 1
            pd_count += m_hat == config.m_true
        assert result.summary["points"]["0"]["pd"] == pd_count / len(by_trial)

    def test_sweep_expansion(self, tmp_path):
        config = parse_config(BASE_CONFIG + "sweep:\n  snr_db: [6.0, 12.0]\n  alpha: [0.05, 0.1]\n")
        result = run_experiment(config, out_dir=tmp_path)
        assert len(result.summary["points"]) == 4
        overrides = [p["overrides"] for p in result.summary["points"].values()]
        assert {"snr_db": 6.0, "alpha": 0.05} in overrides

    def test_csv_schema(self, tmp_path):
        config = parse_config(BASE_CONFIG)
        run_experiment(config, out_dir=tmp_path)
        header = (tmp_path / "smoke_trials.csv").read_text().splitlines()[0]
        cols = header.split(",")
        for name in ("trial", "stage_M", "accepted", "q_bar", "eta", "iters", "proj_events"):
            assert name in cols
        assert "u_hat_1" in cols and "v_hat_1" in cols


class TestTheoryTables:
    def test_emits_all_tables(self, tmp_path):
        config = parse_config(
            BASE_CONFIG + "sweep:\n  snr_db: [3.0, 5.0]\n  alpha: [0.05]\n"
        )
        paths = theory_tables(config, tmp_path)
        assert set(paths) == {
            "pd_vs_snr", "pd_vs_separation", "pd_vs_range",
            "crlb_vs_separation", "sa_dispersion",
        }
        for path in paths.values():
            assert path.exists() and path.stat().st_size > 0

    def test_sa_dispersion_dominates_crlb(self, tmp_path):
        config = parse_config(BASE_CONFIG)
        paths = theory_tables(config, tmp_path)
        with paths["sa_dispersion"].open() as fh:
            for row in csv.DictReader(fh):
                if row["avg_dispersion"] != "inf":
                    assert float(row["avg_dispersion"]) >= float(row["crlb_avg"]) - 1e-12

    def test_more_snapshots_raise_pd(self, tmp_path):
        config = parse_config(BASE_CONFIG + "sweep:\n  snr_db: [5.0]\n")
        paths = theory_tables(config, tmp_path)
        with paths["pd_vs_snr"].open() as fh:
            rows = [r for r in csv.DictReader(fh)]
        pds = {int(r["K"]): float(r["pd"]) for r in rows}
        assert pds[1] <= pds[2] <= pds[3]

    def test_beta_shrinks_with_separation(self, tmp_path):
        config = parse_config(BASE_CONFIG)
        paths = theory_tables(config, tmp_path)
        with paths["pd_vs_separation"].open() as fh:
            rows = [r for r in csv.DictReader(fh) if r["K"] == "1"]
        betas = [float(r["beta"]) for r in rows]
        seps = [float(r["separation_bw"]) for r in rows]
        order = np.argsort(seps)
        betas = np.array(betas)[order]
        assert betas[-1] < betas[0]
        assert np.all(np.diff(betas) <= 1e-9)


class TestCLI:
    def test_run_and_exit_codes(self, tmp_path, capsys):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text(BASE_CONFIG.replace("trials: 6", "trials: 2"))
        assert cli_main(["run", str(cfg), "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "pd" in out

    def test_config_error_is_exit_one(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("array: nope\ntrials: 1\n")
        assert cli_main(["run", str(cfg)]) == 1

    def test_check_regularity(self, capsys):
        assert cli_main(["check-regularity", "elan_7_l", "--M", "2", "--mode", "weak",
                         "--tuples", "500"]) == 0
        out = capsys.readouterr().out
        assert "weak 2-regular: True" in out

    def test_crlb_command(self, tmp_path, capsys):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text(BASE_CONFIG)
        assert cli_main(["crlb", str(cfg)]) == 0
        assert "sqrt(CRLB)/BW" in capsys.readouterr().out

    def test_theory_command(self, tmp_path):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text(BASE_CONFIG)
        assert cli_main(["theory", str(cfg), "--out", str(tmp_path / "theory")]) == 0
        assert (tmp_path / "theory" / "pd_vs_snr.csv").exists()

    def test_out_dir_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("QRES_OUT_DIR", str(tmp_path / "envout"))
        cfg = tmp_path / "exp.yaml"
        cfg.write_text(BASE_CONFIG.replace("trials: 6", "trials: 1"))
        assert cli_main(["run", str(cfg)]) == 0
        assert (tmp_path / "envout" / "smoke_trials.csv").exists()

    def test_installed_entry_point(self, tmp_path):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text(BASE_CONFIG.replace("trials: 6", "trials: 1"))
        proc = subprocess.run(
            [sys.executable, "-m", "qres.cli", "run", str(cfg), "--out", str(tmp_path)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
