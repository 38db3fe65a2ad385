import hashlib
import json

import numpy as np
import pytest

from flowtrend.cli import main
from flowtrend.cytodata import from_arrays, write_series
from flowtrend.model import load_model
from flowtrend.simgen import DEFAULT_SPEC


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def toy_csv(tmp_path):
    rng = np.random.default_rng(0)
    T, n = 8, 20
    tt = np.repeat(np.arange(1.0, T + 1), n)
    z = rng.random(tt.size) < 0.5
    y = np.where(z, 0.0, 3.0) + 0.1 * tt + 0.4 * rng.normal(size=tt.size)
    path = tmp_path / "toy.csv"
    write_series(from_arrays(tt, y), path, weights=False)
    return path


def run(args, out):
    return main(args + ["--output-dir", str(out), "--no-plots"])


FIT = ["--k", "2", "--lmu", "1", "--lpi", "1", "--lambda-mu", "0.1", "--lambda-pi", "0.1",
       "--r", "3", "--seed", "7", "--restarts", "2"]


def test_fit_round_trip_and_hash(toy_csv, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["fit", "--input", str(toy_csv)] + FIT, a) == 0
    assert run(["fit", "--input", str(toy_csv)] + FIT, b) == 0
    p, h, raw = load_model(a / "model.json")
    assert h.K == 2 and h.r == 3.0 and h.lambda_mu == 0.1
    assert sha(a / "model.json") == sha(b / "model.json")
    assert (a / "objective_trace.csv").read_text().startswith("iteration,objective")
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["k"] == 2


def test_fit_plots(toy_csv, tmp_path):
    out = tmp_path / "p"
    assert main(["fit", "--input", str(toy_csv), "--output-dir", str(out)] + FIT) == 0
    assert (out / "fit.png").stat().st_size > 0
    assert (out / "objective_trace.png").stat().st_size > 0


def test_missing_input(tmp_path, capsys):
    assert run(["fit", "--input", str(tmp_path / "nope.csv")], tmp_path / "o") == 1
    assert "nope.csv" in capsys.readouterr().err


def test_max_iter_exit_code(toy_csv, tmp_path):
    assert run(["fit", "--input", str(toy_csv), "--max-iter", "1"] + FIT, tmp_path / "m") == 2


def test_config_precedence(toy_csv, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k": 3, "seed": 4, "restarts": 1}))
    out = tmp_path / "o"
    assert run(["fit", "--input", str(toy_csv), "--config", str(cfg), "--seed", "9"], out) == 0
    res = json.loads((out / "config.json").read_text())
    assert res["k"] == 3 and res["seed"] == 9 and res["restarts"] == 1


def test_config_unknown_key(toy_csv, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["fit", "--input", str(toy_csv), "--config", str(cfg)], tmp_path / "o") == 1


def test_cv_workers_identical(toy_csv, tmp_path):
    args = ["cv", "--input", str(toy_csv), "--k", "2", "--lmu", "1", "--folds", "2",
            "--lambda-mu-grid", "0.1,0.01", "--lambda-pi-grid", "0", "--restarts", "1",
            "--max-iter", "30"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(args + ["--workers", "1"], a) in (0, 2)
    assert run(args + ["--workers", "2"], b) in (0, 2)
    for name in ("cv_report.json", "score_surface.csv", "model.json"):
        assert sha(a / name) == sha(b / name)


def test_cv_single_cell_equals_fit(toy_csv, tmp_path):
    common = ["--input", str(toy_csv), "--k", "2", "--lmu", "1", "--restarts", "1", "--seed", "2"]
    assert run(["cv"] + common + ["--folds", "2", "--lambda-mu-grid", "0.05",
                                  "--lambda-pi-grid", "0"], tmp_path / "cv") in (0, 2)
    assert run(["fit"] + common + ["--lambda-mu", "0.05"], tmp_path / "fit") in (0, 2)
    assert sha(tmp_path / "cv" / "model.json") == sha(tmp_path / "fit" / "model.json")


def test_cv_invalid_grid(toy_csv, tmp_path):
    assert run(["cv", "--input", str(toy_csv), "--lambda-mu-grid", "-1",
                "--lambda-pi-grid", "0"], tmp_path / "o") == 1


def test_gate_modes(toy_csv, tmp_path):
    assert run(["fit", "--input", str(toy_csv)] + FIT, tmp_path / "f") == 0
    model = str(tmp_path / "f" / "model.json")
    outs = []
    for i, extra in enumerate([["--mode", "hard"], ["--mode", "hard"],
                               ["--mode", "soft", "--seed", "3"], ["--mode", "soft", "--seed", "3"]]):
        out = tmp_path / ("g%d" % i)
        assert run(["gate", "--input", str(toy_csv), "--model", model] + extra, out) == 0
        outs.append(sha(out / "labels.csv"))
    assert outs[0] == outs[1] and outs[2] == outs[3]


def test_gate_dimension_mismatch(toy_csv, tmp_path):
    assert run(["fit", "--input", str(toy_csv)] + FIT, tmp_path / "f") == 0
    other = tmp_path / "other.csv"
    other.write_text("time,y1,y2\n1,0,0\n2,1,1\n")
    assert run(["gate", "--input", str(other), "--model", str(tmp_path / "f" / "model.json")],
               tmp_path / "g") == 1


def _small_template(tmp_path):
    mk = DEFAULT_SPEC["mean_knots"]
    spec = dict(DEFAULT_SPEC, T=30,
                mean_knots={k: {"start": v["start"], "knots": []} for k, v in mk.items()},
                logit_knots={"start": [-0.4, 0.01], "knots": []})
    path = tmp_path / "tmpl.json"
    path.write_text(json.dumps(spec))
    return path


def test_simulate(tmp_path):
    tmpl = _small_template(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["simulate", "--template", str(tmpl), "--delta", "0", "--n-t", "20",
                    "--seed", "5"], out) == 0
    for name in ("series.csv", "truth.json", "labels.csv"):
        assert sha(a / name) == sha(b / name)
    truth, _, _ = load_model(a / "truth.json")
    assert truth.mu[1].mean() == pytest.approx(truth.mu[0].mean(), abs=1e-12)


def test_simulate_bad_delta(tmp_path):
    assert run(["simulate", "--delta", "13"], tmp_path / "o") == 1


def test_evaluate(tmp_path):
    tmpl = _small_template(tmp_path)
    sim = tmp_path / "sim"
    assert run(["simulate", "--template", str(tmpl), "--n-t", "10"], sim) == 0
    lab = str(sim / "labels.csv")
    out = tmp_path / "ev"
    assert run(["evaluate", "--input", lab, "--truth", lab], out) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["rand_index"] == 1.0 and len(m["per_time_rand"]) == 30


def test_evaluate_missing_truth(tmp_path):
    assert run(["evaluate", "--input", "x.csv", "--truth", str(tmp_path / "none.csv")],
               tmp_path / "o") == 1


def test_evaluate_study(tmp_path):
    tmpl = _small_template(tmp_path)
    out = tmp_path / "st"
    assert run(["evaluate", "--study", "--template", str(tmpl), "--deltas", "12", "--reps", "1",
                "--n-t", "20", "--restarts", "1"], out) == 0
    head = (out / "study_summary.csv").read_text().splitlines()[0]
    assert head.split(",")[:4] == ["delta", "model", "rand", "rand_over_oracle"]
    rows = json.loads((out / "study.json").read_text())["summary"]
    assert {r["model"] for r in rows} == {"oracle", "flowtrend", "overfit", "underfit"}
