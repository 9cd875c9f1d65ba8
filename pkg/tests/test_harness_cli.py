import csv
import io
import json
import math
from pathlib import Path

import numpy as np
import pytest

from critspine.cli import main
from critspine.harness import (ConfigError, Experiment, Moments, block_rng, emit_report, resolve_model,
                               run_blocks, run_experiment)
from critspine.model import fixture, model_to_dict

ROOT = Path(__file__).resolve().parents[1]


def _normal_task(rng, size):
    return {"x": rng.standard_normal(size)}


def test_block_streams_are_reproducible_and_distinct():
    a = block_rng(7, 0, 3).random(5)
    np.testing.assert_array_equal(a, block_rng(7, 0, 3).random(5))
    assert not np.allclose(a, block_rng(7, 1, 3).random(5))
    assert not np.allclose(a, block_rng(7, 0, 4).random(5))


def test_results_do_not_depend_on_worker_count():
    one = run_blocks(_normal_task, 2500, seed=3, batch=1)
    two = run_blocks(_normal_task, 2500, seed=3, batch=2)
    assert [b["x"].size for b in one] == [1000, 1000, 500]
    for a, b in zip(one, two):
        np.testing.assert_array_equal(a["x"], b["x"])


def test_moments_merge():
    x = np.random.default_rng(0).random(1000)
    m = Moments.merge([Moments.of(x[:300]), Moments.of(x[300:])])
    assert m.mean == pytest.approx(x.mean(), rel=1e-14)
    assert m.se == pytest.approx(x.std(ddof=1) / math.sqrt(x.size), rel=1e-12)


def test_model_hash_is_content_hash(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(model_to_dict(fixture("M2"))))
    _, h1 = resolve_model(str(p))
    _, h2 = resolve_model(str(p))
    assert h1 == h2 and len(h1) == 40
    with pytest.raises(ConfigError):
        resolve_model("fixture:NOPE")


def test_oracle_report_roundtrip():
    exp = Experiment.from_file(ROOT / "experiments" / "c01_extinction_closed_form.json")
    rep = run_experiment(exp)
    assert rep.status == "pass" and rep.exit_code == 0
    text = emit_report(rep, "json")
    back = json.loads(text)
    assert back["status"] == "pass"
    assert back["experiment"]["seed"] == exp.seed
    assert back["model_hash"] == rep.model_hash
    rows = list(csv.DictReader(io.StringIO(emit_report(rep, "csv"))))
    assert rows and set(rows[0]) == {"check", "t", "value", "target", "error", "pass"}


def test_simulated_paths_identical_across_batches(tmp_path):
    params = {"mu": [1.0, 0.0], "T": 1.0, "dt": 0.01, "n_paths": 1500}
    reps = [run_experiment(Experiment("simulate", "fixture:M3", params, seed=11, batch=b)) for b in (1, 3)]
    assert reps[0].paths == reps[1].paths
    out = tmp_path / "paths.csv"
    emit_report(reps[0], "csv", out)
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1500
    assert list(rows[0]) == ["path_id", "extinct_at", "mass_1", "mass_2"]


def test_failed_check_exit_code(tmp_path):
    exp = {"kind": "oracle", "model": "fixture:M1",
           "params": {"quantity": "v", "t": [2.0], "expected": [[0.4]], "rtol": 1e-6}}
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(exp))
    assert main(["run", str(p), "--out", str(tmp_path / "r.json")]) == 1
    assert json.loads((tmp_path / "r.json").read_text())["status"] == "fail"


def test_inconclusive_exit_code(tmp_path, capsys):
    params = json.dumps({"check": "yaglom_mc_ks", "mu": [1.0], "t": 50.0, "n_sims": 1000, "exact": True})
    assert main(["limits", "--model", "fixture:M1", "--params", params]) == 2
    assert json.loads(capsys.readouterr().out)["status"] == "inconclusive"


def test_cli_subcommand_pass(capsys):
    params = json.dumps({"quantity": "moment_second", "mu": [1.0], "t": 5.0, "g": [1.0], "f": [1.0],
                         "expected": 11.0, "rtol": 1e-12})
    assert main(["oracle", "--model", "fixture:M1", "--params", params, "--seed", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["seed"] == 5 and out["results"][0]["pass"] is True


@pytest.mark.parametrize("argv", [
    ["bogus-kind", "--model", "fixture:M1"],
    ["oracle"],
    ["oracle", "--model", "missing.json"],
    ["oracle", "--model", "fixture:M1", "--params", "{not json"],
    ["oracle", "--model", "fixture:M1", "--params", '{"quantity": "nope"}'],
    ["run"],
])
def test_config_errors_exit_3(argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 3


def test_invalid_model_is_config_error(tmp_path):
    d = model_to_dict(fixture("M2"))
    d["motion"]["q"][0][1] = -0.5
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    assert main(["validate", "--model", str(p)]) == 3
