import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import special

from scorecombine.cli import main
from scorecombine.combiners import Combiner, fisher_statistic, glrt_statistic
from scorecombine.conformal import GuaranteeConfig, calibrate
from scorecombine.fileio import read_scores
from scorecombine.ztransform import fit

COLS = ("a", "b", "c")


def write_csv(path, values, labels=None, cols=COLS, ids=None):
    lines = ["sample_id," + ",".join(cols) + (",label" if labels is not None else "")]
    for i, row in enumerate(np.atleast_2d(values)):
        sid = ids[i] if ids else f"s{i}"
        cells = [sid] + [repr(float(x)) for x in row]
        if labels is not None:
            cells.append(labels[i])
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_ndjson(path, values, cols=COLS):
    with path.open("w") as fh:
        for i, row in enumerate(values):
            fh.write(json.dumps({"sample_id": f"s{i}", **dict(zip(cols, map(float, row)))}) + "\n")
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    rng = np.random.default_rng(0)
    return {
        "train": write_csv(tmp_path / "train.csv", rng.normal(size=(300, 3))),
        "val": write_csv(tmp_path / "val.csv", rng.normal(size=(100, 3))),
        "test": write_csv(tmp_path / "test.csv", rng.normal(-0.5, size=(40, 3)),
                          labels=["inlier"] * 20 + ["ood"] * 20),
        "dir": tmp_path,
    }


def test_fit_is_byte_identical(data):
    d = data["dir"]
    assert run("fit", "--train", data["train"], "--out", d / "m1.json") == 0
    assert run("fit", "--train", data["train"], "--out", d / "m2.json") == 0
    assert (d / "m1.json").read_bytes() == (d / "m2.json").read_bytes()


def test_fit_ndjson_equals_csv(data):
    d = data["dir"]
    values = read_scores(data["train"]).values
    nd = write_ndjson(d / "train.ndjson", values)
    assert run("fit", "--train", data["train"], "--out", d / "m_csv.json") == 0
    assert run("fit", "--train", nd, "--out", d / "m_nd.json") == 0
    assert (d / "m_csv.json").read_bytes() == (d / "m_nd.json").read_bytes()


def test_missing_header_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("1.0,2.0\n3.0,4.0\n")
    assert run("fit", "--train", bad, "--out", tmp_path / "m.json") == 2
    assert "header" in capsys.readouterr().err


def test_non_finite_score_exit_3(tmp_path, capsys):
    bad = tmp_path / "nan.csv"
    bad.write_text("sample_id,a\nx,1.0\ny,nan\n")
    assert run("fit", "--train", bad, "--out", tmp_path / "m.json") == 3
    assert "'a'" in capsys.readouterr().err


def test_combine_glrt_one_row_matches_library(data):
    d = data["dir"]
    one = write_csv(d / "one.csv", [[0.3, -1.2, 2.0]])
    run("fit", "--train", data["train"], "--out", d / "m.json")
    assert run("combine", "--transform", d / "m.json", "--test", one, "--rule", "glrt",
               "--epsilon", 0.25, "--out", d / "s.csv") == 0
    t = fit(read_scores(data["train"]))
    expected = glrt_statistic(t.transform_matrix(read_scores(one))[0], 0.25)
    out = read_scores(d / "s.csv", ignore=("rule",))
    assert out.column("statistic")[0] == expected


def test_combine_fisher_from_z_file(tmp_path):
    z = np.array([[0.2, -1.0, 0.4], [1.5, 0.1, -2.2]])
    zf = write_csv(tmp_path / "z.csv", z)
    assert run("combine", "--z-input", "--test", zf, "--rule", "fisher",
               "--out", tmp_path / "s.csv") == 0
    got = read_scores(tmp_path / "s.csv", ignore=("rule",)).column("statistic")
    assert np.array_equal(got, [fisher_statistic(special.ndtr(r)) for r in z])


def test_combine_unknown_rule_exit_2(data, capsys):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    assert run("combine", "--transform", d / "m.json", "--test", data["test"], "--rule",
               "median", "--out", d / "s.csv") == 2
    err = capsys.readouterr().err
    assert "glrt" in err and "fisher" in err


def test_combine_all_rules_run(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    for rule in ("glrt", "fisher", "bonferroni", "simes", "stouffer", "alr", "glrt-cov"):
        assert run("combine", "--transform", d / "m.json", "--test", data["test"], "--rule",
                   rule, "--out", d / f"s_{rule}.csv") == 0, rule


def test_combine_csi_rule(tmp_path):
    rng = np.random.default_rng(1)
    cols = ("cos", "norm", "shift")
    train = write_csv(tmp_path / "tr.csv", rng.uniform(0.5, 2, size=(50, 3)), cols=cols)
    test = write_csv(tmp_path / "te.csv", [[0.5, 2.0, 3.0]], cols=cols)
    assert run("fit", "--train", train, "--csi-groups", "cos:norm:shift",
               "--out", tmp_path / "m.json") == 0
    assert run("combine", "--transform", tmp_path / "m.json", "--test", test, "--rule", "csi",
               "--out", tmp_path / "s.csv") == 0
    vals = read_scores(train).values
    expected = 0.5 * 2.0 / vals[:, 1].mean() + 3.0 / vals[:, 2].mean()
    got = read_scores(tmp_path / "s.csv", ignore=("rule",)).column("statistic")[0]
    assert got == pytest.approx(expected, rel=1e-14)


def test_calibrate_v100_pinned(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    assert run("calibrate", "--transform", d / "m.json", "--val", data["val"],
               "--alpha", 0.05, "--delta", 0.1, "--out", d / "cal.json") == 0
    cal = json.loads((d / "cal.json").read_text())["calibration"]
    assert cal["l"] == 2 and cal["a"] == 2.99 / 101 and cal["v"] == 100


def test_calibrate_refuses_training_data(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    assert run("calibrate", "--transform", d / "m.json", "--val", data["train"],
               "--out", d / "cal.json") == 2
    assert run("calibrate", "--transform", d / "m.json", "--val", data["val"],
               "--train", data["val"], "--out", d / "cal.json") == 2


def test_calibrate_alpha_zero_exit_2(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    assert run("calibrate", "--transform", d / "m.json", "--val", data["val"],
               "--alpha", 0, "--out", d / "cal.json") == 2


def _pipeline(data, out_name):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    run("calibrate", "--transform", d / "m.json", "--val", data["val"], "--out", d / "cal.json")
    assert run("detect", "--calibration", d / "cal.json", "--test", data["test"],
               "--out", d / out_name) == 0
    return d / out_name


def test_detect_matches_library(data):
    out = _pipeline(data, "dec.csv")
    t = fit(read_scores(data["train"]))
    comb = Combiner("glrt", 0.25)
    cal = calibrate(comb.statistics(t, read_scores(data["val"])), GuaranteeConfig(0.05, 0.1))
    expected = cal.detect(comb.statistics(t, read_scores(data["test"])))
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")][1:]
    got = [ln.split(",")[-1] == "ood" for ln in lines]
    assert got == expected.tolist()


def test_detect_empty_test_gives_header(data):
    d = data["dir"]
    empty = d / "empty.csv"
    empty.write_text("sample_id,a,b,c\n")
    _pipeline(data, "dec.csv")
    assert run("detect", "--calibration", d / "cal.json", "--test", empty,
               "--out", d / "e.csv") == 0
    body = [ln for ln in (d / "e.csv").read_text().splitlines() if not ln.startswith("#")]
    assert body == ["sample_id,statistic,p_value,decision"]


def test_detect_corrupt_calibration_exit_3(data):
    d = data["dir"]
    bad = d / "cal.json"
    bad.write_text('{"format": "scorecombine.detector", "version": 1, "model": {')
    assert run("detect", "--calibration", bad, "--test", data["test"],
               "--out", d / "x.csv") == 3
    bad.write_text(json.dumps({"format": "scorecombine.detector", "version": 1}))
    assert run("detect", "--calibration", bad, "--test", data["test"],
               "--out", d / "x.csv") == 3


def stats_file(path, inlier, ood):
    lines = ["sample_id,statistic,label"]
    lines += [f"i{k},{x!r},inlier" for k, x in enumerate(inlier)]
    lines += [f"o{k},{x!r},ood" for k, x in enumerate(ood)]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.mark.parametrize("inlier, ood, auc", [
    ([0.9, 0.8], [0.1, 0.2], 1.0),
    ([1.0, 2.0], [1.0, 2.0], 0.5),
])
def test_evaluate_auroc(tmp_path, inlier, ood, auc):
    f = stats_file(tmp_path / "s.csv", inlier, ood)
    assert run("evaluate", "--statistics", f, "--out", tmp_path / "r.json") == 0
    assert json.loads((tmp_path / "r.json").read_text())["auroc"] == auc


def test_evaluate_dr_at_far_toy(tmp_path):
    f = stats_file(tmp_path / "s.csv", [1.0, 2.0, 3.0, 4.0], [0.0, 0.5])
    assert run("evaluate", "--statistics", f, "--alpha", "0.25", "--out", tmp_path / "r.json",
               "--roc-out", tmp_path / "roc.csv") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["dr_at_far"] == [{"alpha": 0.25, "tau": 1.0, "far": 0.25, "dr": 1.0,
                                 "degenerate": False}]
    assert (tmp_path / "roc.csv").exists()


def test_evaluate_accepts_combine_output(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    run("combine", "--transform", d / "m.json", "--test", data["test"], "--out", d / "s.csv")
    assert run("evaluate", "--statistics", d / "s.csv", "--out", d / "r.json") == 0


def test_simulate_deterministic(tmp_path):
    cfg = tmp_path / "scn.json"
    cfg.write_text(json.dumps({"scenarios": "default", "n": 500, "n_boot": 10,
                               "combiners": ["glrt", "stouffer", "bonferroni"]}))
    for name in ("a.csv", "b.csv"):
        assert run("simulate", "--scenarios", cfg, "--seed", 3, "--out", tmp_path / name,
                   "--json-out", tmp_path / (name + ".json")) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = json.loads((tmp_path / "a.csv.json").read_text())["rows"]
    assert len(rows) == 5 * 3


def test_simulate_invalid_covariance_exit_2(tmp_path, capsys):
    cfg = tmp_path / "scn.json"
    cfg.write_text(json.dumps({"scenarios": [
        {"kind": "dense", "m": 2, "correlation": [[1.0, 2.0], [2.0, 1.0]]}]}))
    assert run("simulate", "--scenarios", cfg, "--out", tmp_path / "x.csv") == 2
    assert "positive definite" in capsys.readouterr().err


def test_epsilon_sweep_subcommand(tmp_path):
    cfg = tmp_path / "scn.json"
    cfg.write_text(json.dumps({"scenarios": [{"kind": "dense", "m": 12, "n": 1000}]}))
    assert run("epsilon-sweep", "--scenarios", cfg, "--epsilons", "0,0.25,0.5,1",
               "--out", tmp_path / "eps.csv") == 0
    body = [ln for ln in (tmp_path / "eps.csv").read_text().splitlines()
            if not ln.startswith("#")]
    assert body[0] == "scenario,epsilon,auroc,dr_at_far" and len(body) == 5


def test_guarantee_subcommand(tmp_path):
    assert run("guarantee", "--v", 100, "--trials", 200, "--out", tmp_path / "g.json") == 0
    rep = json.loads((tmp_path / "g.json").read_text())
    assert rep["l"] == 2


def test_eigen_subcommand_and_m1(tmp_path):
    rng = np.random.default_rng(2)
    train = write_csv(tmp_path / "tr.csv", rng.normal(size=(200, 3)))
    test = write_csv(tmp_path / "te.csv", rng.normal(-0.5, size=(60, 3)),
                     labels=["inlier"] * 30 + ["ood"] * 30)
    assert run("eigen", "--train", train, "--test", test, "--out", tmp_path / "e.csv",
               "--json-out", tmp_path / "e.json") == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert len(rep["rows"]) == 3
    train1 = write_csv(tmp_path / "tr1.csv", rng.normal(size=(50, 1)), cols=("a",))
    test1 = write_csv(tmp_path / "te1.csv", rng.normal(size=(10, 1)), cols=("a",),
                      labels=["inlier"] * 5 + ["ood"] * 5)
    assert run("eigen", "--train", train1, "--test", test1, "--out", tmp_path / "e1.csv",
               "--json-out", tmp_path / "e1.json") == 0
    assert json.loads((tmp_path / "e1.json").read_text())["spearman"] is None


def test_eigen_non_numeric_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("sample_id,a\nx,1.0\ny,abc\n")
    assert run("eigen", "--train", bad, "--test", bad, "--out", tmp_path / "e.csv") == 2
    assert "bad.csv:3" in capsys.readouterr().err


def test_config_file_supplies_flags(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    cfg = d / "run.json"
    cfg.write_text(json.dumps({"transform": str(d / "m.json"), "test": str(data["test"]),
                               "rule": "stouffer", "out": str(d / "s.csv")}))
    assert run("combine", "--config", cfg) == 0
    assert "stouffer" in (d / "s.csv").read_text()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("combine", "--config", cfg) == 2


def test_missing_required_flag_exit_2(tmp_path):
    assert run("fit", "--out", tmp_path / "m.json") == 2


def test_output_header_records_provenance(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    run("combine", "--transform", d / "m.json", "--test", data["test"], "--seed", 5,
        "--out", d / "s.csv")
    first = (d / "s.csv").read_text().splitlines()[0]
    assert first.startswith("# tool=scorecombine version=") and "config=" in first
    assert first.endswith("seed=5")


def test_ndjson_output_roundtrips(data):
    d = data["dir"]
    run("fit", "--train", data["train"], "--out", d / "m.json")
    run("combine", "--transform", d / "m.json", "--test", data["test"], "--format", "ndjson",
        "--out", d / "s.ndjson")
    run("combine", "--transform", d / "m.json", "--test", data["test"], "--out", d / "s.csv")
    a = read_scores(d / "s.ndjson", ignore=("rule",))
    b = read_scores(d / "s.csv", ignore=("rule",))
    assert np.array_equal(a.values, b.values) and a.labels == b.labels


def test_module_entry_point(data):
    d = data["dir"]
    proc = subprocess.run([sys.executable, "-m", "scorecombine", "fit", "--train",
                           str(data["train"]), "--out", str(d / "m.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
