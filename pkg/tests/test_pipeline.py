import csv
import json

import pytest

from bragg_nac import cli, pipeline

TINY = {
    "data": {"n_samples": 300},
    "global_search": {"population": 4, "budget": 8, "epochs": 1},
    "local_hpo": {"n_trials": 3, "epochs": 1},
    "train": {"epochs": 2},
    "compress": {"n_iterations": 2, "epochs": 1},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, tiny_config):
    run_dir = tmp_path_factory.mktemp("run")
    assert cli.main(["run-all", "--config", tiny_config, "--run-dir", str(run_dir)]) == 0
    return run_dir


def test_outputs_and_summary(finished_run):
    for rel in ("config.json", "manifest.json", "report/pareto.csv", "report/trajectory.csv",
                "report/distances.csv", "report/summary.csv"):
        assert (finished_run / rel).exists(), rel
    rows = list(csv.reader((finished_run / "report/summary.csv").open()))
    assert rows[0] == ["model", "mean_distance_px", "mbops", "params"]
    assert [r[0] for r in rows[1:]] == ["BraggNN", "NAC base", "NAC compressed"]
    manifest = json.loads((finished_run / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(pipeline.STAGES)


def test_config_persisted(finished_run):
    config = json.loads((finished_run / "config.json").read_text())
    assert config["global_search"]["budget"] == 8
    assert config["compress"]["n_iterations"] == 2


def test_rerun_is_up_to_date(finished_run, capsys):
    assert cli.main(["run-all", "--run-dir", str(finished_run)]) == 0
    out = capsys.readouterr().out
    assert out.count("up-to-date") == len(pipeline.STAGES)


def test_changed_inputs_rerun_downstream(finished_run, tmp_path, capsys):
    config = json.loads((finished_run / "config.json").read_text())
    config["compress"]["epochs"] = 2
    path = tmp_path / "changed.json"
    path.write_text(json.dumps(config))
    assert cli.main(["run-all", "--config", str(path), "--run-dir", str(finished_run)]) == 0
    out = capsys.readouterr().out
    assert "train: up-to-date" in out
    assert "compress: done" in out and "evaluate: done" in out


def test_same_seed_same_tables(tmp_path, tiny_config):
    dirs = [tmp_path / "first", tmp_path / "second"]
    for d in dirs:
        assert cli.main(["run-all", "--config", tiny_config, "--run-dir", str(d),
                         "--seed", "5"]) == 0
    for rel in ("search/trials.jsonl", "report/summary.csv", "report/trajectory.csv"):
        assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes()


def test_report_echoes_paper_budgets(capsys):
    config = pipeline.make_config(paper_scale=True)
    assert pipeline.budgets(config) == {"global_trials": 200, "hpo_trials": 100,
                                        "partial_epochs": 50}
    desk = pipeline.make_config()
    assert pipeline.budgets(desk) == {"global_trials": 40, "hpo_trials": 30, "partial_epochs": 10}


def test_missing_prerequisite_exit_code(tmp_path, capsys):
    assert cli.main(["compress", "--run-dir", str(tmp_path)]) == 2
    assert "missing data/dataset.nacd; run `gen-data` first" in capsys.readouterr().err
    assert cli.main(["gen-data", "--run-dir", str(tmp_path), "--n", "50"]) == 0
    assert cli.main(["compress", "--run-dir", str(tmp_path)]) == 2
    assert "models/nac_base.nacf" in capsys.readouterr().err


def test_config_errors_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"data": {"n_samples": 3}}')
    assert cli.main(["gen-data", "--config", str(bad), "--run-dir", str(tmp_path)]) == 1
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad), "--run-dir", str(tmp_path)]) == 1
    bad.write_text('{"mystery": {}}')
    assert cli.main(["gen-data", "--config", str(bad), "--run-dir", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 1


def test_standalone_dataset(tmp_path):
    out = tmp_path / "peaks.nacd"
    assert cli.main(["gen-data", "--n", "40", "--seed", "3", "--noise-level", "0.2",
                     "--out", str(out)]) == 0
    assert out.read_bytes()[:4] == b"NACD"


def test_search_resumes_after_interruption(tmp_path, tiny_config, finished_run):
    run_dir = tmp_path / "crashed"
    assert cli.main(["gen-data", "--config", tiny_config, "--run-dir", str(run_dir)]) == 0
    full = (finished_run / "search/trials.jsonl").read_text().splitlines()
    (run_dir / "search").mkdir()
    # first generation finished, second torn mid-record
    (run_dir / "search/trials.jsonl").write_text("\n".join(full[:4]) + "\n" + full[4][:30])
    run = pipeline.Run.open(str(run_dir))
    stamp = run.inputs_hash(run.config["global_search"], ["data/dataset.nacd"])
    (run_dir / "search/inputs.sha256").write_text(stamp + "\n")
    assert cli.main(["global-search", "--run-dir", str(run_dir)]) == 0
    assert (run_dir / "search/trials.jsonl").read_bytes() == \
        (finished_run / "search/trials.jsonl").read_bytes()
