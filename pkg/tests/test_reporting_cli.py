import json
import re
from pathlib import Path

import numpy as np
import pytest
import yaml

from mt2st.cli import check_report, main
from mt2st.config import OUTPUT_DIR_ENV, ConfigError, load_config, parse_config
from mt2st.optimizer import TrainConfig
from mt2st.reporting import (
    REPORT_COLUMNS,
    REPORT_SCHEMA,
    emit_series,
    format_report_csv,
    parse_report_csv,
    read_step_stream,
    run_dir_name,
)
from mt2st.schedules import Diminish, DiminishParams, Switch
from mt2st.tasks import generate_suite
from mt2st.trainer import train

SMALL = {
    "suite": {"input_dim": 12, "n_aux": 2, "rho": 0.8, "samples": 160, "class_counts": 3},
    "model": {"hidden_dims": [5]},
    "train": {"learning_rate": 0.05, "total_steps": 40, "batch_size": 16},
    "seeds": [0, 3],
    "strategies": [
        {"name": "STL", "type": "stl"},
        {"name": "S0", "type": "switch", "t_switch": 0},
        {"name": "MTL", "type": "mtl", "gammas": 1.0},
        {"name": "MT2ST-D", "type": "diminish", "gamma0": 1.0, "eta": 0.02},
        {"name": "MT2ST-S", "type": "switch", "t_switch": 20},
    ],
    "output_dir": "out",
}


def write_config(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = write_config(root, SMALL)
    assert main(["run", str(path)]) == 0
    return root / "out"


def rows_by(out, strategy):
    rows = parse_report_csv((out / "results.csv").read_text())
    return {int(r["seed"]): r for r in rows if r["strategy"] == strategy}


class TestRun:
    def test_files_written(self, small_run):
        assert (small_run / "results.csv").exists() and (small_run / "summary.json").exists()
        for s in SMALL["strategies"]:
            for seed in SMALL["seeds"]:
                d = small_run / "runs" / run_dir_name(s["name"], seed)
                assert len(read_step_stream(d / "steps.jsonl")) == 40
                assert json.loads((d / "summary.json").read_text())["seed"] == seed

    def test_stl_compression_is_exactly_zero(self, small_run):
        for r in rows_by(small_run, "STL").values():
            assert float(r["compression_expected"]) == 0.0 == float(r["compression_realized"])

    def test_switch_zero_rows_equal_stl_rows(self, small_run):
        stl, s0 = rows_by(small_run, "STL"), rows_by(small_run, "S0")
        skip = {"strategy", "switch_step"}
        for seed in SMALL["seeds"]:
            assert {k: v for k, v in stl[seed].items() if k not in skip} == {
                k: v for k, v in s0[seed].items() if k not in skip
            }

    def test_compression_recomputes(self, small_run):
        check_report(parse_report_csv((small_run / "results.csv").read_text()))

    def test_schema_line(self, small_run):
        first, header = (small_run / "results.csv").read_text().splitlines()[:2]
        assert first == f"# schema: {REPORT_SCHEMA} columns={','.join(REPORT_COLUMNS)}"
        assert header == ",".join(REPORT_COLUMNS)

    def test_aggregate(self, small_run):
        summary = json.loads((small_run / "summary.json").read_text())
        agg = summary["aggregate"]["MTL"]["primary_loss"]
        losses = [float(r["primary_loss"]) for r in rows_by(small_run, "MTL").values()]
        assert agg["n"] == 2 and agg["mean"] == pytest.approx(np.mean(losses), abs=1e-15)
        assert agg["std"] == pytest.approx(np.std(losses), abs=1e-15)

    def test_no_wall_clock_in_streams(self, small_run):
        rec = read_step_stream(small_run / "runs" / "STL__seed0" / "steps.jsonl")[0]
        assert "wall_ms" not in rec

    def test_rerun_is_byte_identical(self, small_run, tmp_path):
        path = write_config(tmp_path, SMALL)
        assert main(["run", str(path)]) == 0
        for rel in ["results.csv", "summary.json", "runs/MT2ST-D__seed3/steps.jsonl", "runs/MTL__seed0/summary.json"]:
            assert (tmp_path / "out" / rel).read_bytes() == (small_run / rel).read_bytes()

    def test_parallel_matches_serial(self, small_run, tmp_path):
        path = write_config(tmp_path, SMALL)
        assert main(["run", str(path), "--jobs", "2"]) == 0
        assert (tmp_path / "out" / "results.csv").read_bytes() == (small_run / "results.csv").read_bytes()

    def test_env_overrides_output_dir(self, tmp_path, monkeypatch):
        doc = dict(SMALL, seeds=[0], strategies=[{"name": "STL", "type": "stl"}])
        target = tmp_path / "elsewhere"
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(target))
        assert main(["run", str(write_config(tmp_path, doc))]) == 0
        rows = parse_report_csv((target / "results.csv").read_text())
        assert len(rows) == 1 and float(rows[0]["compression_realized"]) == 0.0
        assert not (tmp_path / "out").exists()


class TestErrors:
    @pytest.mark.parametrize(
        "patch,field",
        [
            ({"seeds": []}, "seeds"),
            ({"strategies": []}, "strategies"),
            ({"train": {"learning_rate": -1}}, "train.learning_rate"),
            ({"suite": {"n_aux": 2, "rho": [0.1]}}, "suite.rho"),
            ({"strategies": [{"name": "x", "type": "pcgrad"}]}, "strategies[0].type"),
            ({"strategies": [{"name": "x", "type": "diminish", "tasks": [{"gamma0": 1, "eta": 0}]}]}, "strategies[0].tasks"),
            ({"suite": {"input_dim": 8, "n_aux": 2, "latent_dim": 4}}, "suite.latent_dim"),
            ({"typo": 1}, "typo"),
        ],
    )
    def test_field_level_messages(self, patch, field):
        with pytest.raises(ConfigError, match="^" + re.escape(field) + ":"):
            parse_config({**SMALL, **patch})

    def test_validate_exit_codes(self, tmp_path, capsys):
        assert main(["validate", str(write_config(tmp_path, SMALL))]) == 0
        assert main(["validate", str(write_config(tmp_path, {**SMALL, "seeds": [1, 1]}, "bad.yaml"))]) == 2
        assert "seeds" in capsys.readouterr().err
        assert main(["validate", str(tmp_path / "missing.yaml")]) == 2

    def test_nan_abort_names_the_cell(self, tmp_path, capsys):
        doc = {**SMALL, "seeds": [0], "train": {"learning_rate": 1e6, "total_steps": 40, "batch_size": 16},
               "strategies": [{"name": "MTL", "type": "mtl", "gammas": 1.0}],
               "suite": {**SMALL["suite"], "kinds": "regression", "class_counts": 2}}
        assert main(["run", str(write_config(tmp_path, doc))]) == 3
        err = capsys.readouterr().err
        assert "strategy='MTL'" in err and "seed=0" in err

    def test_series_missing_run_dir(self, tmp_path):
        assert main(["series", str(tmp_path), "--kind", "loss"]) == 2

    def test_unknown_series_kind(self, small_run):
        with pytest.raises(SystemExit) as exc:
            main(["series", str(small_run / "runs" / "STL__seed0"), "--kind", "grads"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def runs():
    suite = generate_suite(1, 10, 2, samples=120)
    cfg = TrainConfig(0.05, 30, 8, 0)
    return {
        "switch": train(suite, Switch(12), cfg, hidden_dims=(4,)),
        "diminish": train(suite, Diminish([DiminishParams(1.0, 0.1)] * 2), cfg, hidden_dims=(4,)),
    }


class TestSeries:
    def table(self, text):
        lines = text.strip().splitlines()
        return lines[0].split(), np.array([[float(v) for v in l.split()] for l in lines[1:]])

    def test_switch_gamma_is_step_function(self, runs):
        header, data = self.table(emit_series(runs["switch"], "gamma"))
        assert header == ["step", "gamma_1", "gamma_2"]
        assert data[:12, 1:].tolist() == [[1.0, 1.0]] * 12 and data[12:, 1:].tolist() == [[0.0, 0.0]] * 18

    def test_diminish_gamma_strictly_decreasing(self, runs):
        _, data = self.table(emit_series(runs["diminish"], "gamma"))
        assert np.all(np.diff(data[:, 1]) < 0)

    def test_loss_rows_match_steps(self, runs):
        header, data = self.table(emit_series(runs["switch"], "loss"))
        assert header == ["step", "loss_0", "loss_1", "loss_2"] and data.shape == (30, 4)
        assert data[:, 0].tolist() == list(range(30))

    def test_alignment_columns(self, runs):
        header, data = self.table(emit_series(runs["switch"], "alignment"))
        assert header == ["step", "alignment", "primary_grad_norm_sq"]
        np.testing.assert_allclose(data[12:, 1], data[12:, 2], rtol=0, atol=1e-9)

    def test_cli_series_matches_function(self, small_run, tmp_path, capsys):
        run_dir = small_run / "runs" / "MT2ST-S__seed0"
        assert main(["series", str(run_dir), "--kind", "gamma", "-o", str(tmp_path / "g.txt")]) == 0
        assert main(["series", str(run_dir), "--kind", "gamma"]) == 0
        assert capsys.readouterr().out == (tmp_path / "g.txt").read_text()
        _, data = self.table((tmp_path / "g.txt").read_text())
        assert data.shape == (40, 3) and data[19, 1] == 1.0 and data[20, 1] == 0.0

    def test_empty_run_rejected(self):
        with pytest.raises(ValueError):
            emit_series([], "loss")
        with pytest.raises(ValueError, match="unknown series"):
            emit_series([{"step": 0}], "grads")


def test_report_csv_roundtrip():
    row = {c: 1.5 for c in REPORT_COLUMNS}
    row.update(strategy="a,b", seed=2, convergence_epoch=None)
    parsed = parse_report_csv(format_report_csv([row]))[0]
    assert parsed["strategy"] == "a,b" and parsed["seed"] == "2" and parsed["convergence_epoch"] == ""
    with pytest.raises(ValueError):
        parse_report_csv("strategy,seed\n")


def test_load_config_from_file(tmp_path):
    cfg = load_config(write_config(tmp_path, SMALL))
    assert cfg.seeds == (0, 3) and [s.name for s in cfg.strategies][-1] == "MT2ST-S"
    assert cfg.strategies[3].spec["tasks"] == [{"gamma0": 1.0, "eta": 0.02}] * 2
    assert cfg.resolved_output_dir(tmp_path) == tmp_path / "out"


SHIPPED = sorted((Path(__file__).resolve().parent.parent / "configs").glob("*.yaml"))


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    assert main(["validate", str(path)]) == 0


def test_denoising_config_runs(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    path = next(p for p in SHIPPED if p.name == "denoising.yaml")
    assert main(["run", str(path)]) == 0
    rows = parse_report_csv((tmp_path / "results.csv").read_text())
    assert [r["strategy"] for r in rows] == ["STL", "Variance"]
    gam = read_step_stream(tmp_path / "runs" / "Variance__seed0" / "steps.jsonl")
    assert all(abs(sum(g["gammas"]) - 1.0) <= 1e-9 for g in gam)
