import csv
import json
import os
import time

import numpy as np
import pytest

from fpcert import cli, report
from fpcert.bounds import Certificate, worst_case_rate
from fpcert.fixed_point import FixedPointOperator, QuantileRow, TraceTensor, certify_classical

CLASSICAL = {
    "seed": 3,
    "family": {"kind": "contraction", "dim": 4},
    "n_train": 50,
    "optimizer": {"kind": "classical", "method": "contraction", "beta": 0.8},
    "bounds": {
        "delta": 1e-4,
        "metrics": ["fp_residual", "mse"],
        "tolerances": {
            "fp_residual": {"min": 1e-6, "max": 10.0, "count": 81},
            "mse": {"min": 1e-8, "max": 10.0, "count": 41},
        },
        "quantiles": [0.5, 0.75],
        "k_max": 30,
    },
}

LEARNED = {
    "seed": 1,
    "family": {"kind": "sparse_coding", "m": 8, "n": 16},
    "n_train": 60,
    "optimizer": {
        "kind": "learned",
        "arch": "alista",
        "K": 4,
        "H": 10,
        "train": {"b_targets": [0.1, 0.3], "epochs": 20, "learning_rate": 0.01},
    },
    "bounds": {
        "delta": 1e-5,
        "omega": 1e-5,
        "metrics": ["nmse"],
        "tolerances": {"nmse": {"min": -80, "max": 0, "count": 81, "scale": "linear"}},
        "quantiles": [0.5],
        "k_max": 4,
    },
}

CERT_HEADER = "method,metric,k,epsilon,n_samples,h_samples,empirical,r_bar,bound,confidence"
QUANTILE_HEADER = "metric,k,quantile,epsilon_bound,confidence"


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _run(tmp_path, data, command="all", out="out", extra=()):
    cfg = _write(tmp_path, data)
    return cli.main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])


def _tree(root):
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            full = os.path.join(base, name)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


def test_minimal_contraction_run_is_fast_and_complete(tmp_path):
    t0 = time.perf_counter()
    assert _run(tmp_path, CLASSICAL) == cli.EXIT_OK
    assert time.perf_counter() - t0 < 5.0
    out = tmp_path / "out"
    for name in ("certificates.csv", "quantiles.csv", "ledger.txt", "manifest.json", "traces/fp_residual.fptr"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 3 and manifest["audit"] == "ok"
    assert set(manifest["stages"]) == set(cli.CLASSICAL_PIPELINE)
    assert (out / "plotdata" / "plots.gp").exists()
    assert "0.9919" in (out / "ledger.txt").read_text()


def test_runs_are_byte_identical(tmp_path, monkeypatch):
    assert _run(tmp_path, CLASSICAL, out="a") == 0
    monkeypatch.setenv("FPCERT_THREADS", "3")
    assert _run(tmp_path, CLASSICAL, out="b") == 0
    assert _run(tmp_path, CLASSICAL, out="c", extra=("--threads", "2")) == 0
    a, b, c = (_tree(tmp_path / d) for d in "abc")
    assert a == b == c


def test_stages_run_independently_match_all(tmp_path):
    cfg = _write(tmp_path, CLASSICAL)
    for stage in cli.CLASSICAL_PIPELINE:
        assert cli.main([stage, "--config", cfg, "--out", str(tmp_path / "steps")]) == 0
    assert _run(tmp_path, CLASSICAL, out="whole") == 0
    assert _tree(tmp_path / "steps") == _tree(tmp_path / "whole")


def test_stage_without_prerequisite_is_flagged(tmp_path):
    cfg = _write(tmp_path, CLASSICAL)
    out = tmp_path / "o"
    assert cli.main(["certify", "--config", cfg, "--out", str(out)]) == cli.EXIT_FAILURE
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "partial" and manifest["stages"]["certify"] == "failed"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == cli.EXIT_CONFIG


def test_config_errors_exit_2(tmp_path, capsys):
    bad = dict(CLASSICAL, bounds=dict(CLASSICAL["bounds"], delta=0.0124))
    assert _run(tmp_path, bad) == cli.EXIT_CONFIG
    assert "bounds.tolerances" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert _run(tmp_path, dict(CLASSICAL, family={"kind": "contraction"})) == cli.EXIT_CONFIG
    assert "family.dim" in capsys.readouterr().err


def test_seed_override_changes_hash_and_instances(tmp_path):
    assert _run(tmp_path, CLASSICAL, out="a") == 0
    assert _run(tmp_path, CLASSICAL, out="b", extra=("--seed", "4")) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert mb["seed"] == 4 and ma["config_hash"] != mb["config_hash"]
    assert ma["files"]["instances/train_x.npy"] != mb["files"]["instances/train_x.npy"]


def _exploding(config, family):
    return FixedPointOperator(lambda z, x: 1e200 * z + x, family.dim, ("linear", 0.8), name="bad")


def test_nonfinite_policy(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "build_operator", _exploding)
    assert _run(tmp_path, CLASSICAL, out="strict") == cli.EXIT_NUMERIC
    manifest = json.loads((tmp_path / "strict" / "manifest.json").read_text())
    assert manifest["status"] == "partial" and manifest["stages"]["run"] == "aborted"
    assert "non-finite" in manifest["error"]
    assert _run(tmp_path, CLASSICAL, out="lax", extra=("--no-strict-finite",)) == 0
    manifest = json.loads((tmp_path / "lax" / "manifest.json").read_text())
    assert len(manifest["nonfinite_instances"]["fp_residual"]) == 50
    certs = report.read_certificates(str(tmp_path / "lax" / "certificates.csv"))
    assert all(c.empirical_risk == 1.0 for c in certs if c.k >= 3)


def test_training_abort_exit_3(tmp_path, monkeypatch):
    from fpcert.training import TrainingAborted, train_pacbayes

    def boom(arch, batch, config, *a, **kw):
        res = train_pacbayes(arch, batch, type(config)(**{**config.__dict__, "epochs": 0}))
        raise TrainingAborted(7, res)

    monkeypatch.setattr(cli, "train_pacbayes", boom)
    data = json.loads(json.dumps(LEARNED))
    data["optimizer"]["train"]["b_targets"] = [0.1]
    assert _run(tmp_path, data) == cli.EXIT_NUMERIC
    out = tmp_path / "out"
    assert (out / "posterior_partial.json").exists() and not (out / "posterior.json").exists()
    assert json.loads((out / "manifest.json").read_text())["stages"]["train"] == "aborted"


def test_learned_pipeline(tmp_path):
    assert _run(tmp_path, LEARNED) == 0
    out = tmp_path / "out"
    for name in ("posterior.json", "training_log.csv", "crossval.csv", "certificates.csv", "quantiles.csv"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["accounting"]["n_btargets"] == 2 and manifest["audit"] == "ok"
    certs = report.read_certificates(str(out / "certificates.csv"))
    assert {c.method for c in certs} == {"pac_bayes"}
    assert all(c.confidence == pytest.approx(1 - 2 * 2e-5, abs=1e-15) for c in certs)
    assert all(c.h_samples == 10 and c.n_samples == 60 for c in certs)
    rows = list(csv.reader(open(out / "crossval.csv")))
    assert rows[0] == ["b_target", "score", "selected"] and len(rows) == 3
    assert sum(int(r[2]) for r in rows[1:]) == 1
    log_lines = (out / "training_log.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,sampled_risk,B_value,kl_inverse_term,penalty_term,objective"
    assert len(log_lines) == 21


def test_golden_headers(tmp_path):
    assert _run(tmp_path, CLASSICAL) == 0
    out = tmp_path / "out"
    assert (out / "certificates.csv").read_text().splitlines()[0] == CERT_HEADER
    assert (out / "quantiles.csv").read_text().splitlines()[0] == QUANTILE_HEADER
    first = (out / "certificates.csv").read_text().splitlines()[1]
    assert first == "sample_convergence,fp_residual,0,1e-06,50,1,1,,1,0.9999"


def test_certificate_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    trace = TraceTensor(rng.exponential(size=(40, 1, 6)), "fp_residual")
    certs, rows, _ = certify_classical(trace, np.logspace(-3, 1, 9), 1e-3, (0.5, 0.9))
    extra = Certificate("mse", 2, 0.25, 0.1, 0.3, 0.99, "pac_bayes", 10, 5, r_bar=0.2)
    report.write_certificates(certs + [extra], str(tmp_path))
    back = report.read_certificates(str(tmp_path / "certificates.csv"))
    assert len(back) == len(certs) + 1
    for a, b in zip(certs + [extra], back):
        assert (a.method, a.metric_id, a.k, a.n_samples, a.h_samples) == (b.method, b.metric_id, b.k, b.n_samples, b.h_samples)
        for f in ("epsilon", "empirical_risk", "risk_bound", "confidence"):
            assert getattr(b, f) == pytest.approx(getattr(a, f), rel=1e-11)
        assert (a.r_bar is None) == (b.r_bar is None)
    # writing the parsed bundle reproduces the file byte for byte
    report.write_certificates(back, str(tmp_path), "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "certificates.csv").read_bytes()
    report.write_quantiles(rows, str(tmp_path))
    qback = report.read_quantiles(str(tmp_path / "quantiles.csv"))
    assert [(r.k, r.quantile) for r in qback] == [(r.k, r.quantile) for r in rows if r.epsilon_bound is not None]


def test_empty_quantile_table_is_header_only(tmp_path):
    rows = [QuantileRow("nmse", k, 0.9, None, 0.99) for k in range(3)]
    report.write_quantiles(rows, str(tmp_path))
    assert (tmp_path / "quantiles.csv").read_text() == QUANTILE_HEADER + "\n"
    assert report.read_quantiles(str(tmp_path / "quantiles.csv")) == []


def test_writers_reject_empty_and_unwritable(tmp_path):
    with pytest.raises(ValueError):
        report.write_certificates([], str(tmp_path))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cert = Certificate("mse", 0, 1.0, 0.0, 0.1, 0.99, "sample_convergence", 10)
    with pytest.raises(OSError):
        report.write_certificates([cert], str(blocker / "sub"))


def _dat(path):
    lines = [l for l in open(path).read().splitlines() if not l.startswith("#")]
    return [(int(l.split()[0]), float(l.split()[1])) for l in lines]


def test_plotdata_matches_certificates(tmp_path):
    assert _run(tmp_path, CLASSICAL) == 0
    out = tmp_path / "out"
    certs = report.read_certificates(str(out / "certificates.csv"))
    plot = out / "plotdata"
    script = (plot / "plots.gp").read_text()
    names = sorted(os.listdir(plot))
    for name in names:
        if name.endswith(".dat"):
            assert f"'{name}'" in script
    by_key = {}
    for c in certs:
        by_key.setdefault((c.metric_id, c.epsilon), {})[c.k] = c.risk_bound
    success = [n for n in names if n.startswith("success_")]
    assert len(success) == 81 + 41
    for name in success:
        header = open(plot / name).readline()
        metric = header.split("metric ")[1].split(",")[0]
        eps = float(header.rsplit("epsilon ", 1)[1])
        expected = by_key[(metric, eps)]
        for k, v in _dat(plot / name):
            assert v == float(report.fmt(1.0 - expected[k]))
    quantile = [n for n in names if n.startswith("quantile_")]
    assert len(quantile) == 4
    for name in quantile:
        values = [v for _, v in _dat(plot / name)]
        assert all(b <= a for a, b in zip(values, values[1:])), name
    worst = _dat(plot / "worst_case_linear_0p8.dat")
    assert [k for k, _ in worst] == list(range(31))
    assert all(v == float(report.fmt(worst_case_rate("linear", 0.8, k))) for k, v in worst)


def test_audit_detects_tampering(tmp_path):
    assert _run(tmp_path, CLASSICAL) == 0
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert report.audit(str(out), manifest) == []
    text = (out / "quantiles.csv").read_text().replace("0.9919", "0.9999", 1)
    (out / "quantiles.csv").write_text(text)
    problems = report.audit(str(out), manifest)
    assert len(problems) == 1 and "quantiles.csv line 2" in problems[0]
    assert report.audit(str(out), {}) == ["manifest has no accounting record"]


def test_l2ws_pipeline_with_distance_bound(tmp_path):
    data = {
        "seed": 2,
        "family": {"kind": "unconstrained_qp", "n": 4},
        "n_train": 40,
        "optimizer": {
            "kind": "learned",
            "arch": "l2ws",
            "K": 2,
            "layer_dims": [4, 3, 4],
            "H": 5,
            "distance_bound_delta": 1e-4,
            "train": {"epochs": 5, "loss": "fp_residual"},
        },
        "bounds": {
            "delta": 1e-5,
            "omega": 1e-5,
            "metrics": ["fp_residual"],
            "tolerances": {"fp_residual": {"min": 1e-3, "max": 1e6, "count": 10}},
            "quantiles": [0.5],
            "ks": [0, 2, 100, 3000],
            "k_max": 3000,
        },
    }
    assert _run(tmp_path, data) == 0
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["audit"] == "ok" and manifest["distance_bound"] > 0
    certs = report.read_certificates(str(out / "certificates.csv"))
    combined = [c for c in certs if c.method == "combined"]
    assert len(combined) == 40
    assert all(c.confidence == pytest.approx(1 - 2e-5 - 1e-4, abs=1e-15) for c in combined)
    ledger = (out / "ledger.txt").read_text()
    assert "distance bound delta" in ledger
    pb = {(c.k, c.epsilon): c.risk_bound for c in certs if c.method == "pac_bayes"}
    for c in combined:
        assert c.risk_bound <= pb[(c.k, c.epsilon)]
