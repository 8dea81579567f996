import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from surgebma.cli import main
from surgebma.utils import load_json

CONFIG_TEMPLATE = """
[station]
hourly_csv = station.csv

[window]
calibration_start = 1984
calibration_end = 2013
projection_year = 2030

[covariates]
temperature_hist = cov/temperature_hist.csv
temperature_proj = cov/temperature_proj.csv
sealevel_hist = cov/sealevel_hist.csv
sealevel_proj = cov/sealevel_proj.csv
nao_hist = cov/nao_hist.csv
nao_proj = cov/nao_proj.csv

[sampler]
n_iterations = 1200
n_chains = 2
burn_in = 200
thinned_size = 1000
psrf_gate = {gate}

[projection]
return_periods = 10, 100
mixture_size = 20000

[run]
seed = 5
structures = {structures}
output_dir = out
"""


def make_workspace(tmp_path, structures="ST, NS1-time", gate="1.5"):
    assert main(
        [
            "simulate",
            "station",
            "--out",
            str(tmp_path / "station.csv"),
            "--first-year",
            "1984",
            "--last-year",
            "2013",
            "--seed",
            "21",
        ]
    ) == 0
    assert main(
        [
            "simulate",
            "covariates",
            "--out",
            str(tmp_path / "cov"),
            "--first-year",
            "1984",
            "--last-year",
            "2013",
            "--projection-year",
            "2030",
            "--seed",
            "22",
        ]
    ) == 0
    (tmp_path / "run.ini").write_text(
        CONFIG_TEMPLATE.format(structures=structures, gate=gate)
    )
    return tmp_path / "run.ini"


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    config = make_workspace(tmp_path)
    code = main(["run-all", "--config", str(config)])
    assert code == 0
    return tmp_path


def test_preprocess_writes_threshold_near_fixture_target(pipeline_dir):
    payload = load_json(pipeline_dir / "out" / "exceedances.json")
    # the station fixture engineers its daily-maxima quantile at 1.0 m
    assert abs(payload["threshold_m"] - 1.0) < 0.05
    years = [b["year"] for b in payload["years"]]
    assert years == list(range(1984, 2014))
    assert "config_sha256" in payload


def test_preprocess_rerun_is_byte_identical(pipeline_dir):
    path = pipeline_dir / "out" / "exceedances.json"
    before = path.read_bytes()
    assert main(["preprocess", "--config", str(pipeline_dir / "run.ini")]) == 0
    assert path.read_bytes() == before


def test_empty_station_file_exits_2(tmp_path):
    config = make_workspace(tmp_path)
    (tmp_path / "station.csv").write_text("")
    code = main(["preprocess", "--config", str(config)])
    assert code == 2


def test_missing_inputs_exit_2(tmp_path):
    config = make_workspace(tmp_path)
    assert main(["calibrate", "--config", str(config)]) == 2
    assert main(["report", "--config", str(config)]) == 2


def test_priors_cover_requested_structures(pipeline_dir):
    payload = load_json(pipeline_dir / "out" / "priors.json")
    assert set(payload["structures"]) == {"ST", "NS1-time"}
    st = payload["structures"]["ST"]
    assert st["lam0"]["family"] == "gamma"
    assert st["xi0"]["family"] == "normal"


def test_calibration_artifacts_and_diagnostics(pipeline_dir):
    for sid in ("ST", "NS1-time"):
        ens = (pipeline_dir / "out" / "ensembles" / f"{sid}.csv").read_text().splitlines()
        assert len(ens) == 1001  # header + thinned draws
        diag = load_json(pipeline_dir / "out" / "diagnostics" / f"{sid}.json")
        assert diag["seed"] != 5  # per-structure derived seed, not the raw run seed
        assert "config_sha256" in diag and "psrf" in diag and "mle" in diag


def test_evidence_and_report_artifacts(pipeline_dir):
    evidence = load_json(pipeline_dir / "out" / "evidence.json")
    assert set(evidence["structures"]) == {"ST", "NS1-time"}
    weights = load_json(pipeline_dir / "out" / "weights.json")
    total = sum(v["weight"] for v in weights.values())
    assert total == pytest.approx(1.0, abs=1e-9)

    table = (pipeline_dir / "out" / "table_s2.csv").read_text().splitlines()
    assert table[0] == "return_period_years,q2.5,q5,q25,q50,q75,q95,q97.5"
    assert len(table) == 3  # two requested periods

    curve = load_json(pipeline_dir / "out" / "curve.json")
    assert [row["T"] for row in curve["curve"]] == [10.0, 100.0]

    rl = (pipeline_dir / "out" / "return_levels" / "ST.csv").read_text().splitlines()
    assert rl[0] == "T10,T100"


def test_weights_csv_row_sums_to_one(pipeline_dir):
    lines = (pipeline_dir / "out" / "weights_all.csv").read_text().splitlines()[1:]
    total = sum(float(line.split(",")[1]) for line in lines)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_manifest_carries_config_hash(pipeline_dir):
    manifest = load_json(pipeline_dir / "out" / "manifest.json")
    config_text = (pipeline_dir / "run.ini").read_text()
    from surgebma.utils import sha256_of_text

    assert manifest["config_sha256"] == sha256_of_text(config_text)
    listed = set(manifest["artifacts"])
    assert {"exceedances.json", "priors.json", "evidence.json", "table_s2.csv"} <= listed


def test_run_metadata_written(pipeline_dir):
    meta = load_json(pipeline_dir / "out" / "run_metadata.json")
    assert meta["version"]
    assert "completed_utc" in meta


def test_fit_priors_from_station_directory(tmp_path):
    config = make_workspace(tmp_path)
    stations = tmp_path / "stations"
    stations.mkdir()
    for i, seed in enumerate((41, 42)):
        main(
            ["simulate", "station", "--out", str(stations / f"s{i}.csv"),
             "--first-year", "1984", "--last-year", "2013", "--seed", str(seed)]
        )
    text = (tmp_path / "run.ini").read_text().replace(
        "[run]", "[priors]\nstations_dir = stations\n\n[run]"
    )
    (tmp_path / "run.ini").write_text(text)

    assert main(["fit-priors", "--config", str(config)]) == 0
    mle_table = load_json(tmp_path / "out" / "mle_table.json")
    # two archive stations plus the target station itself
    assert len(mle_table["structures"]["ST"]["estimates"]) == 3
    priors = load_json(tmp_path / "out" / "priors.json")
    assert set(priors["structures"]) == {"ST", "NS1-time"}

    # worker pool must reproduce the serial table exactly
    serial = (tmp_path / "out" / "mle_table.json").read_bytes()
    assert main(["fit-priors", "--config", str(config), "--workers", "2"]) == 0
    assert (tmp_path / "out" / "mle_table.json").read_bytes() == serial


def test_stationary_only_run_needs_no_covariate_files(tmp_path):
    config = make_workspace(tmp_path, structures="ST")
    # drop the covariate files and section entirely
    import shutil as _shutil

    _shutil.rmtree(tmp_path / "cov")
    text = (tmp_path / "run.ini").read_text()
    head, _, tail = text.partition("[covariates]")
    tail = tail.partition("[sampler]")[2]
    (tmp_path / "run.ini").write_text(head + "[sampler]" + tail)

    assert main(["preprocess", "--config", str(config)]) == 0
    assert main(["fit-priors", "--config", str(config)]) == 0
    assert main(["calibrate", "--config", str(config)]) == 0
    assert main(["evidence", "--config", str(config)]) == 0
    assert main(["project", "--config", str(config)]) == 0


def test_simulate_record_roundtrips_through_ingest_format(tmp_path):
    from surgebma.preprocess import ExceedanceSet

    out = tmp_path / "record.json"
    code = main(
        [
            "simulate", "record", "--out", str(out), "--structure", "NS1-time",
            "--lam0", "0.01", "--lam1", "0.004", "--first-year", "1990",
            "--last-year", "2013", "--seed", "3",
        ]
    )
    assert code == 0
    record = ExceedanceSet.load(out)
    assert record.threshold == 1.0
    assert record.n_events > 0
    assert [b.year for b in record.years] == list(range(1990, 2014))


def test_console_entrypoint_runs():
    out = subprocess.run(
        [sys.executable, "-m", "surgebma.cli", "--version"], capture_output=True, text=True
    )
    assert out.returncode == 0
    assert "surgebma" in out.stdout


def test_st_desk_scale_calibration_under_budget(tmp_path):
    import time

    config = make_workspace(tmp_path, structures="ST")
    text = (tmp_path / "run.ini").read_text()
    text = text.replace("n_iterations = 1200", "n_iterations = 10000")
    text = text.replace("n_chains = 2", "n_chains = 4")
    text = text.replace("burn_in = 200", "burn_in = 1000")
    (tmp_path / "run.ini").write_text(text)
    assert main(["preprocess", "--config", str(config)]) == 0
    assert main(["fit-priors", "--config", str(config)]) == 0
    t0 = time.perf_counter()
    assert main(["calibrate", "--config", str(config)]) == 0
    assert time.perf_counter() - t0 < 60.0


def test_psrf_gate_failure_exit_code_and_force(tmp_path):
    # a gate nobody can pass: any finite chain has PSRF above 1.0
    config = make_workspace(tmp_path, structures="ST", gate="1.0")
    assert main(["preprocess", "--config", str(config)]) == 0
    assert main(["fit-priors", "--config", str(config)]) == 0
    assert main(["calibrate", "--config", str(config)]) == 1
    assert main(["calibrate", "--config", str(config), "--force"]) == 0
    diag = load_json(tmp_path / "out" / "diagnostics" / "ST.json")
    assert diag["forced"] is True
    assert diag["psrf_gate_failed"]


def test_seed_override_changes_artifacts(tmp_path):
    config = make_workspace(tmp_path, structures="ST")
    assert main(["preprocess", "--config", str(config)]) == 0
    assert main(["fit-priors", "--config", str(config)]) == 0
    assert main(["calibrate", "--config", str(config)]) == 0
    a = (tmp_path / "out" / "ensembles" / "ST.csv").read_bytes()
    assert main(["calibrate", "--config", str(config), "--seed", "6"]) == 0
    b = (tmp_path / "out" / "ensembles" / "ST.csv").read_bytes()
    assert a != b


def test_parallel_workers_reproduce_serial_artifacts(tmp_path):
    config = make_workspace(tmp_path, structures="ST, NS1-time")
    assert main(["preprocess", "--config", str(config)]) == 0
    assert main(["fit-priors", "--config", str(config)]) == 0
    assert main(["calibrate", "--config", str(config)]) == 0
    serial = {
        sid: (tmp_path / "out" / "ensembles" / f"{sid}.csv").read_bytes()
        for sid in ("ST", "NS1-time")
    }
    assert main(["calibrate", "--config", str(config), "--workers", "2"]) == 0
    for sid, blob in serial.items():
        assert (tmp_path / "out" / "ensembles" / f"{sid}.csv").read_bytes() == blob
