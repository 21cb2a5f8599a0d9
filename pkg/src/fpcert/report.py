"""Certificate and quantile CSV writers, plot data, manifest and audit."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from typing import Optional, Sequence

from .bounds import Certificate, ConfidenceLedger, statement_ledger, worst_case_rate
from .fixed_point import QuantileRow

CERT_COLUMNS = (
    "method",
    "metric",
    "k",
    "epsilon",
    "n_samples",
    "h_samples",
    "empirical",
    "r_bar",
    "bound",
    "confidence",
)
QUANTILE_COLUMNS = ("metric", "k", "quantile", "epsilon_bound", "confidence")


def fmt(value: Optional[float]) -> str:
    """12 significant digits; None is an empty field."""
    if value is None:
        return ""
    return f"{float(value):.12g}"


def _parse(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")


def write_certificates(certs: Sequence[Certificate], directory: str, name: str = "certificates.csv") -> str:
    if not certs:
        raise ValueError("no certificates to write")
    _ensure_dir(directory)
    path = os.path.join(directory, name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CERT_COLUMNS)
        for c in certs:
            w.writerow(
                [
                    c.method,
                    c.metric_id,
                    c.k,
                    fmt(c.epsilon),
                    c.n_samples,
                    c.h_samples,
                    fmt(c.empirical_risk),
                    fmt(c.r_bar),
                    fmt(c.risk_bound),
                    fmt(c.confidence),
                ]
            )
    return path


def write_quantiles(rows: Sequence[QuantileRow], directory: str, name: str = "quantiles.csv") -> str:
    _ensure_dir(directory)
    path = os.path.join(directory, name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUANTILE_COLUMNS)
        for r in rows:
            if r.epsilon_bound is None:
                continue
            w.writerow([r.metric_id, r.k, fmt(r.quantile), fmt(r.epsilon_bound), fmt(r.confidence)])
    return path


def read_certificates(path: str) -> list[Certificate]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CERT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for row in reader:
            rec = dict(zip(header, row))
            out.append(
                Certificate(
                    rec["metric"],
                    int(rec["k"]),
                    float(rec["epsilon"]),
                    float(rec["empirical"]),
                    float(rec["bound"]),
                    float(rec["confidence"]),
                    rec["method"],
                    int(rec["n_samples"]),
                    int(rec["h_samples"]),
                    _parse(rec["r_bar"]),
                )
            )
    return out


def read_quantiles(path: str) -> list[QuantileRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != QUANTILE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            QuantileRow(r[0], int(r[1]), float(r[2]), _parse(r[3]), float(r[4])) for r in reader
        ]


def write_ledger(sections: Sequence[tuple[str, ConfidenceLedger]], directory: str) -> str:
    """ledger.txt: one titled block per certified statement."""
    _ensure_dir(directory)
    path = os.path.join(directory, "ledger.txt")
    with open(path, "w") as fh:
        for i, (title, ledger) in enumerate(sections):
            if i:
                fh.write("\n")
            fh.write(f"[{title}]\n{ledger.describe()}\n")
    return path


def _safe(value: float) -> str:
    return fmt(value).replace("-", "m").replace(".", "p").replace("+", "")


def emit_plotdata(
    certs: Sequence[Certificate],
    rows: Sequence[QuantileRow],
    directory: str,
    worst_case: Optional[tuple[str, float]] = None,
    k_max: Optional[int] = None,
) -> list[str]:
    """One ``k value`` data file per (metric, curve) and a gnuplot script.

    Success-rate curves are 1 - bound for each (method, epsilon); quantile
    curves list the certified tolerance for each quantile q.
    """
    if not certs:
        raise ValueError("no certificates to plot")
    out_dir = os.path.join(directory, "plotdata")
    _ensure_dir(out_dir)
    curves: dict[tuple, list[tuple[int, float]]] = {}
    for c in certs:
        curves.setdefault(("success", c.metric_id, c.method, c.epsilon), []).append((c.k, 1.0 - c.risk_bound))
    for r in rows:
        if r.epsilon_bound is not None:
            curves.setdefault(("quantile", r.metric_id, r.quantile), []).append((r.k, r.epsilon_bound))
    if worst_case is not None and k_max is not None:
        kind, param = worst_case
        curves[("worst_case", kind, param)] = [(k, worst_case_rate(kind, param, k)) for k in range(k_max + 1)]

    files = []
    for key in sorted(curves, key=lambda t: tuple(str(x) for x in t)):
        if key[0] == "success":
            _, metric, method, eps = key
            name = f"success_{metric}_{method}_eps{_safe(eps)}.dat"
            comment = f"# success rate (1 - risk bound), metric {metric}, method {method}, epsilon {fmt(eps)}"
        elif key[0] == "quantile":
            _, metric, q = key
            name = f"quantile_{metric}_q{_safe(q)}.dat"
            comment = f"# certified tolerance, metric {metric}, quantile {fmt(q)}"
        else:
            _, kind, param = key
            name = f"worst_case_{kind}_{_safe(param)}.dat"
            comment = f"# worst-case residual ratio, class {kind}, parameter {fmt(param)}"
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(comment + "\n# k value\n")
            for k, v in sorted(curves[key]):
                fh.write(f"{k} {fmt(v)}\n")
        files.append(path)

    script = os.path.join(out_dir, "plots.gp")
    with open(script, "w") as fh:
        fh.write("set terminal pngcairo size 900,600\nset xlabel 'k'\n")
        for path in files:
            base = os.path.basename(path)
            fh.write(f"set output '{base[:-4]}.png'\n")
            ylabel = "success rate" if base.startswith("success") else "value"
            fh.write(f"set ylabel '{ylabel}'\nplot '{base}' using 1:2 with linespoints title '{base[:-4]}'\n")
    return files + [script]


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(directory: str, record: dict) -> str:
    _ensure_dir(directory)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        return {}
    with open(path) as fh:
        return json.load(fh)


def audit(directory: str, manifest: dict) -> list[str]:
    """Re-derive every certificate and quantile confidence from the manifest's
    (delta, omega, multiplicities); returns a list of mismatches.

    ``accounting["n_tolerances"]`` maps each metric to its grid size.
    """
    acct = manifest.get("accounting")
    if not acct:
        return ["manifest has no accounting record"]
    delta, omega = acct["delta"], acct["omega"]
    n_bt, n_tol = acct["n_btargets"], acct["n_tolerances"]
    risk_conf = statement_ledger(delta, omega, n_bt, 1).confidence
    dist_delta = acct.get("distance_bound_delta") or 0.0
    problems = []
    cert_path = os.path.join(directory, "certificates.csv")
    if os.path.exists(cert_path):
        for i, c in enumerate(read_certificates(cert_path), start=2):
            want = risk_conf - (dist_delta if c.method == "combined" else 0.0)
            if not math.isclose(c.confidence, float(fmt(want)), rel_tol=0, abs_tol=1e-12):
                problems.append(f"certificates.csv line {i}: confidence {c.confidence} != {fmt(want)}")
    q_path = os.path.join(directory, "quantiles.csv")
    if os.path.exists(q_path):
        for i, r in enumerate(read_quantiles(q_path), start=2):
            if r.metric_id not in n_tol:
                problems.append(f"quantiles.csv line {i}: metric {r.metric_id} has no ledger entry")
                continue
            want = statement_ledger(delta, omega, n_bt, n_tol[r.metric_id]).confidence
            if not math.isclose(r.confidence, float(fmt(want)), rel_tol=0, abs_tol=1e-12):
                problems.append(f"quantiles.csv line {i}: confidence {r.confidence} != {fmt(want)}")
    return problems
