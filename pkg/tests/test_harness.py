import json

import numpy as np
import pytest

from slateope import harness
from slateope.abstraction import TrainConfig
from slateope.cli import main
from slateope.harness import (
    ExperimentConfig,
    MetricsRow,
    emit_report,
    lips_label,
    mse_from,
    oracle_best_beta,
    read_metrics_csv,
    run_experiment,
    run_trial,
    sign_test,
)

SMALL_TRAIN = dict(n_latent=4, hidden=8, pretrain_epochs=2, finetune_epochs=1, batch_size=64, marginal_samples=20)
SMALL = {
    "env": {"n_slots": 2, "slot_size": 2, "context_dim": 3},
    "slate_sizes": [2],
    "data_sizes": [200],
    "n_seeds": 2,
    "n_mc": 10000,
    "reward_epochs": 2,
    "dm_samples": 50,
    "train": SMALL_TRAIN,
}


def small_config(**kw):
    cfg = ExperimentConfig.from_dict(SMALL)
    return cfg if not kw else ExperimentConfig.from_dict(kw, base=cfg)


class TestConfig:
    def test_profiles(self):
        desk = ExperimentConfig.profile("desk")
        assert (desk.env.n_slots, desk.env.slot_size, desk.data_sizes, desk.n_seeds) == (4, 4, (2000,), 20)
        paper = ExperimentConfig.profile("paper")
        assert (paper.env.n_slots, paper.env.slot_size, paper.data_sizes, paper.n_seeds) == (8, 10, (4000,), 50)
        assert paper.train == TrainConfig()
        with pytest.raises(ValueError):
            ExperimentConfig.profile("laptop")

    @pytest.mark.parametrize("kw", [dict(slate_sizes=()), dict(n_seeds=0), dict(estimators=("ips", "snips"))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"n_seed": 3})

    def test_json_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(SMALL))
        cfg = ExperimentConfig.from_json(path, base=ExperimentConfig.profile("desk"))
        assert cfg.env.slot_size == 2 and cfg.train.n_latent == 4 and cfg.n_seeds == 2


class TestMetricsRow:
    def test_identity(self):
        rng = np.random.default_rng(0)
        row = MetricsRow.from_estimates("x", (2, 100, 1), 0.7, 0.0, rng.normal(0.75, 0.1, 20))
        assert row.identity_residual() <= 1e-12
        row.check_identity()

    def test_broken_identity_raises(self):
        row = MetricsRow("x", 2, 100, 1, 1.0, 0.0, nmse=0.5, squared_bias=0.1, variance=0.1)
        with pytest.raises(ArithmeticError):
            row.check_identity()

    def test_identity_near_zero_error(self):
        row = MetricsRow.from_estimates("x", (2, 100, 1), 1.0, 0.0, 1.0 + 1e-10 * np.arange(-2, 3))
        row.check_identity()

    def test_table_arithmetic(self):
        assert mse_from(0.5, 0.2) == pytest.approx(0.45, abs=1e-15)


class TestExperiment:
    def test_degenerate_nae(self, monkeypatch):
        real = harness._point_env

        def constant_env(config, point):
            env = real(config, point)
            return env.with_tables(eta=np.zeros_like(env.eta), offsets=np.full_like(env.offsets, 1e9))

        monkeypatch.setattr(harness, "_point_env", constant_env)
        cfg = small_config(estimators=["nae"], n_seeds=5,
                           env={"reward_noise": 1e-9, "eps_logging": 1.0, "eps_target": 1.0})
        row = run_experiment(cfg).row("nae")
        assert row.v_true == pytest.approx(1.0, abs=1e-8)
        assert row.nmse < 1e-6

    def test_ips_unbiased_at_scale(self):
        cfg = small_config(estimators=["ips"], n_seeds=30, data_sizes=[500], n_mc=10**6)
        row = run_experiment(cfg).row("ips")
        est = np.array(row.estimates)
        se = est.std(ddof=1) / np.sqrt(len(est))
        assert abs(est.mean() - row.v_true) < 4 * se

    def test_csv_byte_identical(self, tmp_path):
        cfg = small_config(estimators=["nae", "ips", "pi", "dm", "lips"])
        a = emit_report(run_experiment(cfg), tmp_path / "a")
        b = emit_report(run_experiment(cfg), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert [p.name for p in a] == [p.name for p in b]

    def test_streams_do_not_interact(self):
        cfg = small_config(estimators=["ips", "dm", "dr", "offcem"])
        full = run_trial(cfg, (2, 200, 1), 0)["estimates"]
        only = run_trial(small_config(estimators=["dr"]), (2, 200, 1), 0)["estimates"]
        assert only["dr"] == full["dr"]

    def test_lips_rows_and_slope_choice(self):
        cfg = small_config(estimators=["lips"], n_seeds=1)
        trial = run_trial(cfg, (2, 200, 1), 0)
        labels = {lips_label(b) for b in cfg.train.betas}
        assert labels | {"lips"} == set(trial["estimates"])
        chosen = trial["slope"]["selected_beta"]
        assert trial["estimates"]["lips"] == trial["estimates"][lips_label(chosen)]

    def test_errors_carry_point(self, monkeypatch):
        def boom(config, point):
            raise ValueError("bad table")

        monkeypatch.setattr(harness, "_point_env", boom)
        with pytest.raises(RuntimeError, match="L=2, n=200, reward_fn=1"):
            run_experiment(small_config(estimators=["ips"]))


@pytest.fixture(scope="module")
def result():
    return run_experiment(small_config(estimators=["nae", "ips", "pi"], reward_fns=[1, 2]))


class TestReport:
    def test_csv_round_trip(self, result, tmp_path):
        emit_report(result, tmp_path)
        back = read_metrics_csv(tmp_path / "metrics.csv")
        for a, b in zip(result.rows, back):
            for f in MetricsRow.CSV_FIELDS:
                va, vb = getattr(a, f), getattr(b, f)
                if isinstance(va, float):
                    assert abs(va - vb) <= 1e-15 * max(1.0, abs(va))
                else:
                    assert va == vb

    def test_json_has_per_seed_arrays(self, result, tmp_path):
        emit_report(result, tmp_path, formats=("json",), plotdata=False)
        payload = json.loads((tmp_path / "metrics.json").read_text())
        assert all(len(r["estimates"]) == 2 for r in payload["rows"])
        assert len(payload["trials"]) == 2

    def test_plot_series_count(self, result, tmp_path):
        paths = emit_report(result, tmp_path, formats=())
        assert len(paths) == 4
        plot = json.loads((tmp_path / "plot_fn1_n_data.json").read_text())
        assert len(plot["series"]) == 3
        assert all(v > 0 for s in plot["series"].values() for v in s)

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path)


class TestComparisons:
    def test_sign_test(self):
        res = sign_test(np.zeros(10), np.ones(10))
        assert res["wins"] == 10 and res["p_value"] == pytest.approx(0.5**10)
        assert sign_test([1.0, 1.0], [1.0, 1.0])["p_value"] == 1.0

    def test_oracle_best_beta(self):
        cfg = small_config(estimators=["lips"])
        result = run_experiment(cfg)
        beta, row = oracle_best_beta(result)
        assert row.nmse == min(result.row(lips_label(b)).nmse for b in cfg.train.betas)
        assert beta in cfg.train.betas


class TestCli:
    def write_config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(SMALL))
        return path

    def test_verify(self, tmp_path, capsys):
        assert main(["verify", "--out", str(tmp_path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["passed"] and (tmp_path / "verify.json").exists()

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--networks", "2", "--seed", "3"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"]

    def test_dump(self, tmp_path, capsys):
        assert main(["dump", "--n", "25", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "logs.jsonl").read_text().splitlines()
        assert len(lines) == 25
        assert set(json.loads(lines[0])) == {"x", "s", "r", "pscore", "pscore_slot"}

    def test_run(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        code = main(["run", "--config", str(cfg), "--estimators", "ips,pi", "--out", str(tmp_path / "res")])
        assert code == 0
        assert {r["estimator"] for r in json.loads(capsys.readouterr().out)["rows"]} == {"ips", "pi"}
        assert (tmp_path / "res" / "metrics.csv").exists()

    def test_tune(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert main(["tune", "--config", str(cfg), "--out", str(tmp_path / "t"), "--paper-literal-signs"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["selected_beta"] == payload["candidates"][payload["selected_index"]]["beta"]
        manifest = json.loads((tmp_path / "t" / "abstraction_beta_0.01" / "manifest.json").read_text())
        assert manifest["literal_signs"] is True

    def test_failure_reports_json(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["command"] == "run" and err["error"] == "FileNotFoundError"

    def test_bad_estimator(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--estimators", "snips"]) == 1
        assert "snips" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]
