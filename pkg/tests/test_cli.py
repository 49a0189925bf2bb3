import json
from pathlib import Path

import numpy as np
import pytest

from vfagg.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    main,
    read_dataset,
    read_records_csv,
    write_dataset,
)
from vfagg.core import PatientSeries
from vfagg.synthdata import CohortConfig, generate_cohort


@pytest.fixture(scope="module")
def small_cohort_file(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("data")
    config = CohortConfig(
        patients=45,
        d=6,
        k_true=3,
        c_true=2,
        noise_sd=1.5,
        series_length_range=(5, 8),
        date_gap_range=(0.3, 0.7),
        intercept_range=(-14.0, -4.0),
        rate_range=(-2.0, -0.5),
        seed=5,
    )
    cohort, _ = generate_cohort(config)
    path = tmp / "cohort.jsonl"
    write_dataset(path, cohort)
    return path


def run_config_file(tmp_path, **overrides):
    config = dict(
        d=6,
        k=3,
        c=2,
        min_cluster_size=2,
        eta_grid=[0.3, 3.0],
        folds=3,
        n_range=[2, 4],
        seed=0,
        n_jobs=1,
    )
    config.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return path


class TestSynth:
    def test_writes_requested_patients_and_truth(self, tmp_path):
        config = tmp_path / "cohort.json"
        config.write_text(json.dumps({"patients": 12, "d": 5, "k_true": 2, "seed": 3}))
        out = tmp_path / "data.jsonl"
        assert main(["synth", "--config", str(config), "--out", str(out)]) == EXIT_OK
        cohort = read_dataset(out)
        assert len(cohort) == 12
        truth = json.loads(Path(f"{out}.truth.json").read_text())
        assert set(truth["patients"]) == {s.patient_id for s in cohort}

    def test_round_trip_preserves_full_precision(self, tmp_path):
        config = tmp_path / "cohort.json"
        config.write_text(json.dumps({"patients": 5, "d": 4, "k_true": 2, "seed": 9}))
        out = tmp_path / "data.jsonl"
        main(["synth", "--config", str(config), "--out", str(out)])
        cohort = read_dataset(out)
        tmp2 = tmp_path / "again.jsonl"
        write_dataset(tmp2, cohort)
        assert out.read_bytes() == tmp2.read_bytes()

    def test_same_seed_identical_bytes(self, tmp_path):
        config = tmp_path / "cohort.json"
        config.write_text(json.dumps({"patients": 8, "d": 4, "k_true": 2, "seed": 1}))
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        main(["synth", "--config", str(config), "--out", str(a)])
        main(["synth", "--config", str(config), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_malformed_config_names_field(self, tmp_path, capsys):
        config = tmp_path / "cohort.json"
        config.write_text(json.dumps({"patients": -3}))
        out = tmp_path / "data.jsonl"
        code = main(["synth", "--config", str(config), "--out", str(out)])
        assert code == EXIT_DATA
        assert "patient" in capsys.readouterr().err

    def test_unknown_config_field_reported(self, tmp_path, capsys):
        config = tmp_path / "cohort.json"
        config.write_text(json.dumps({"patientz": 5}))
        code = main(["synth", "--config", str(config), "--out", str(tmp_path / "x")])
        assert code == EXIT_DATA
        assert "patientz" in capsys.readouterr().err


class TestDatasetIo:
    def test_parse_error_reports_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "a", "observations": [{"date": 0.0, "values": [-1.0]}, '
                       '{"date": 1.0, "values": [-2.0]}]}\nnot json\n')
        code = main(["experts", "--dataset", str(bad), "--out", str(tmp_path / "e")])
        assert code == EXIT_DATA
        assert ":2:" in capsys.readouterr().err

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        code = main(
            ["experts", "--dataset", str(tmp_path / "nope.jsonl"),
             "--out", str(tmp_path / "e.json")]
        )
        assert code == EXIT_DATA

    def test_bad_flag_is_usage_error(self, capsys):
        assert main(["evaluate", "--nonsense"]) == EXIT_USAGE

    def test_unknown_strategy_is_usage_error(self, small_cohort_file, tmp_path):
        code = main(
            ["evaluate", "--dataset", str(small_cohort_file),
             "--out", str(tmp_path), "--strategy", "bogus"]
        )
        assert code == EXIT_USAGE


class TestExperts:
    def test_export_counts(self, small_cohort_file, tmp_path):
        out = tmp_path / "experts.json"
        code = main(
            ["experts", "--dataset", str(small_cohort_file), "--out", str(out),
             "--k", "3", "--c", "2", "--min-cluster-size", "2", "--seed", "0"]
        )
        assert code == EXIT_OK
        payload = json.loads(out.read_text())
        pools = {p["method"]: p["experts"] for p in payload["pools"]}
        assert len(pools["lr"]) == 45
        assert len(pools["sc"]) <= 45
        assert 1 <= len(pools["tslr"]) <= 3
        assert all(len(e["slope"]) == payload["d"] for e in pools["lr"])


class TestTunePredict:
    def test_tune_then_predict_with_ir(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        etas = tmp_path / "etas.json"
        code = main(
            ["tune", "--dataset", str(small_cohort_file), "--out", str(etas),
             "--config", str(run_cfg)]
        )
        assert code == EXIT_OK
        payload = json.loads(etas.read_text())
        assert set(payload["etas"]) == {"lr", "tslr", "sc", "flat", "hier"}

        cohort = read_dataset(small_cohort_file)
        pid = cohort[0].patient_id
        out = tmp_path / "pred.json"
        code = main(
            ["predict", "--dataset", str(small_cohort_file), "--patient", pid,
             "--n", "3", "--strategy", "hier", "--eta", "ir",
             "--eta-file", str(etas), "--config", str(run_cfg), "--out", str(out)]
        )
        assert code == EXIT_OK
        result = json.loads(out.read_text())
        assert result["strategy"] == "hier"
        assert len(result["prediction"]) == 6
        assert all(-30.0 <= v <= 0.0 for v in result["prediction"])

    def test_predict_rg_eta(self, small_cohort_file, tmp_path, capsys):
        cohort = read_dataset(small_cohort_file)
        run_cfg = run_config_file(tmp_path)
        code = main(
            ["predict", "--dataset", str(small_cohort_file),
             "--patient", cohort[1].patient_id, "--n", "2",
             "--strategy", "flat", "--eta", "rg", "--config", str(run_cfg)]
        )
        assert code == EXIT_OK
        result = json.loads(capsys.readouterr().out)
        assert result["eta"] > 0

    def test_predict_ir_without_eta_file_is_usage_error(
        self, small_cohort_file, tmp_path, capsys
    ):
        cohort = read_dataset(small_cohort_file)
        run_cfg = run_config_file(tmp_path)
        code = main(
            ["predict", "--dataset", str(small_cohort_file),
             "--patient", cohort[0].patient_id, "--n", "2",
             "--strategy", "flat", "--eta", "ir", "--config", str(run_cfg)]
        )
        assert code == EXIT_USAGE

    def test_predict_unknown_patient_is_data_error(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        code = main(
            ["predict", "--dataset", str(small_cohort_file), "--patient", "ghost",
             "--n", "2", "--strategy", "flat", "--eta", "1.0",
             "--config", str(run_cfg)]
        )
        assert code == EXIT_DATA


class TestEvaluateAndReport:
    def test_full_evaluate_outputs(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        out = tmp_path / "report"
        code = main(
            ["evaluate", "--dataset", str(small_cohort_file), "--out", str(out),
             "--config", str(run_cfg)]
        )
        assert code == EXIT_OK
        names = {p.name for p in out.iterdir()}
        assert names == {
            "records.csv", "ir_table.csv", "ir_vs_eta.csv",
            "summary.json", "pvalues.json",
        }
        records = read_records_csv(out / "records.csv")
        methods = {r.method for r in records}
        assert "flat[ir]" in methods and "hier[rg]" in methods

        table = (out / "ir_table.csv").read_text().splitlines()
        assert table[0].split(",")[:2] == ["method", "eta"]
        assert len(table) > 5

        summary = json.loads((out / "summary.json").read_text())
        assert summary["tested_patients"] == 45

    def test_evaluate_reruns_byte_identical(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            assert main(
                ["evaluate", "--dataset", str(small_cohort_file),
                 "--out", str(out), "--config", str(run_cfg)]
            ) == EXIT_OK
        for name in ("records.csv", "ir_table.csv", "ir_vs_eta.csv",
                     "summary.json", "pvalues.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    def test_strategy_restriction_limits_rows(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        out = tmp_path / "flat_only"
        code = main(
            ["evaluate", "--dataset", str(small_cohort_file), "--out", str(out),
             "--config", str(run_cfg), "--strategy", "flat"]
        )
        assert code == EXIT_OK
        records = read_records_csv(out / "records.csv")
        methods = {r.method for r in records}
        assert methods == {"flat[ir]", "flat[rg]", "best[all]"}

    def test_fixed_eta_flag(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        out = tmp_path / "fixed"
        code = main(
            ["evaluate", "--dataset", str(small_cohort_file), "--out", str(out),
             "--config", str(run_cfg), "--strategy", "flat", "--eta", "2.5"]
        )
        assert code == EXIT_OK
        records = read_records_csv(out / "records.csv")
        assert {r.method for r in records} == {"flat[fix]", "best[all]"}

    def test_report_rebuilds_tables(self, small_cohort_file, tmp_path):
        run_cfg = run_config_file(tmp_path)
        out = tmp_path / "orig"
        main(
            ["evaluate", "--dataset", str(small_cohort_file), "--out", str(out),
             "--config", str(run_cfg)]
        )
        rebuilt = tmp_path / "rebuilt"
        code = main(
            ["report", "--records", str(out / "records.csv"),
             "--out", str(rebuilt), "--n-min", "2", "--n-max", "4"]
        )
        assert code == EXIT_OK
        assert (rebuilt / "ir_table.csv").read_bytes() == (
            out / "ir_table.csv"
        ).read_bytes()
        assert (rebuilt / "pvalues.json").read_bytes() == (
            out / "pvalues.json"
        ).read_bytes()
