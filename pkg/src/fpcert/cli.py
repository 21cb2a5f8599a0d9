"""Command-line front end: gen, run, certify, train, calibrate, quantiles, report, all."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from collections import defaultdict
from typing import Optional

import numpy as np

from . import report
from .bounds import PriorGridSpec, quantile_from_grid, statement_ledger
from .calibration import CalibrationConfig, certify_learned
from .config import ConfigError, RunConfig, config_hash, load_config
from .fixed_point import NonFiniteError, QuantileRow, TraceTensor, certify_classical, run_trace
from .learned import build_arch, l2ws_distance_bound, posterior_from_json, posterior_to_json
from .problems import (
    ContractionFamily,
    DeblurringFamily,
    InstanceBatch,
    SparseCodingFamily,
    UnconstrainedQPFamily,
    load_idx,
)
from .solvers import contraction_operator, dr_boxqp_operator, gd_operator, ista_operator, warmstart_provider
from .training import TrainConfig, TrainingAborted, crossval_btarget, train_pacbayes, write_training_log

log = logging.getLogger("fpcert")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

STAGES = ("gen", "run", "certify", "train", "calibrate", "quantiles", "report")
CLASSICAL_PIPELINE = ("gen", "run", "certify", "quantiles", "report")
LEARNED_PIPELINE = ("gen", "train", "calibrate", "quantiles", "report")


class StageError(RuntimeError):
    """A stage cannot run on the artifacts present."""


class WrongStage(StageError):
    """The stage does not apply to this kind of optimizer."""


class Run:
    """Effective config, output directory and the manifest being built."""

    def __init__(self, config: RunConfig, out: str, threads: Optional[int], strict_finite: bool):
        self.config = config
        self.out = out
        self.threads = threads
        self.strict_finite = strict_finite
        self.hash = config_hash(config)
        self.learned = config.optimizer.kind == "learned"
        old = report.read_manifest(out)
        if old.get("config_hash") == self.hash:
            self.manifest = old
        else:
            self.manifest = {"config_hash": self.hash, "seed": config.seed, "stages": {}}

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def need(self, stage: str) -> None:
        if self.manifest["stages"].get(stage) != "ok":
            raise StageError(f"stage {stage!r} has not completed for this config in {self.out}")

    def finish(self, status: str, error: Optional[str] = None) -> None:
        files = {}
        for root, _, names in os.walk(self.out):
            for name in names:
                full = os.path.join(root, name)
                rel = os.path.relpath(full, self.out)
                if rel != "manifest.json":
                    files[rel.replace(os.sep, "/")] = report.sha256_file(full)
        self.manifest["files"] = dict(sorted(files.items()))
        self.manifest["status"] = status
        self.manifest["strict_finite"] = self.strict_finite
        if error is None:
            self.manifest.pop("error", None)
        else:
            self.manifest["error"] = error
        report.write_manifest(self.out, self.manifest)


# problem and operator construction


def build_family(config: RunConfig):
    fam, seed = config.family, config.seed
    if fam.kind == "contraction":
        return ContractionFamily(fam.dim, seed)
    if fam.kind == "sparse_coding":
        return SparseCodingFamily(fam.m, fam.n, seed, fam.keep_prob, fam.snr_db)
    if fam.kind == "unconstrained_qp":
        return UnconstrainedQPFamily(fam.n, seed)
    images = None if fam.images_path is None else load_idx(fam.images_path)
    return DeblurringFamily(fam.side, seed, fam.blur_size, fam.noise_std, fam.rho, images)


def build_operator(config: RunConfig, family):
    opt = config.optimizer
    if opt.method == "contraction":
        return contraction_operator(family.dim, opt.beta)
    if opt.method == "gd":
        step = opt.step
        if step is None:
            eig = np.linalg.eigvalsh(family.P)
            step = 2.0 / (eig[0] + eig[-1])
        return gd_operator(family.P, step)
    if opt.method == "ista":
        return ista_operator(family.D, opt.rho)
    return dr_boxqp_operator(family.P, family.lower, family.upper, q_map=family.q_of)


def build_learned(config: RunConfig, family):
    opt = config.optimizer
    params = {"K": opt.K, "rho": opt.rho}
    if opt.layer_dims is not None:
        params["layer_dims"] = list(opt.layer_dims)
    return build_arch(opt.arch, family, params)


def prior_grid(config: RunConfig) -> PriorGridSpec:
    t = config.optimizer.train
    return PriorGridSpec(t.lambda_max, t.b)


def _needs_solutions(config: RunConfig) -> bool:
    if any(m in ("mse", "nmse") for m in config.bounds.metrics):
        return True
    opt = config.optimizer
    return opt.kind == "classical" and opt.warm_start.kind == "nearest_neighbor"


def save_split(run: Run, split: str, batch: InstanceBatch) -> None:
    os.makedirs(run.path("instances"), exist_ok=True)
    np.save(run.path("instances", f"{split}_x.npy"), batch.x)
    if batch.z_star is not None:
        np.save(run.path("instances", f"{split}_z.npy"), batch.z_star)


def load_split(run: Run, split: str) -> InstanceBatch:
    x_path = run.path("instances", f"{split}_x.npy")
    if not os.path.exists(x_path):
        raise StageError(f"missing {x_path}; run gen first")
    z_path = run.path("instances", f"{split}_z.npy")
    z = np.load(z_path) if os.path.exists(z_path) else None
    return InstanceBatch(np.load(x_path), z)


def _accounting(run: Run, omega: float, n_btargets: int, dist_delta: Optional[float]) -> dict:
    b = run.config.bounds
    counts = {m: b.tolerances[m].count for m in b.metrics}
    return {
        "delta": b.delta,
        "omega": omega,
        "n_btargets": n_btargets,
        "n_tolerances": counts,
        "distance_bound_delta": dist_delta,
    }


def _ledger_sections(acct: dict) -> list:
    delta, omega, n_bt = acct["delta"], acct["omega"], acct["n_btargets"]
    risk = statement_ledger(delta, omega, n_bt, 1)
    sections = [("risk certificates (each (k, epsilon) cell)", risk)]
    if acct.get("distance_bound_delta"):
        sections.append(
            ("combined certificates", risk.charge("distance bound delta", acct["distance_bound_delta"]))
        )
    for metric, count in acct["n_tolerances"].items():
        sections.append((f"quantile table, metric {metric}", statement_ledger(delta, omega, n_bt, count)))
    return sections


# stages


def stage_gen(run: Run) -> None:
    config = run.config
    family = build_family(config)
    splits = [("train", config.n_train)]
    if config.n_test > 0:
        splits.append(("test", config.n_test))
    opt = config.optimizer
    if opt.kind == "classical" and opt.warm_start.kind == "nearest_neighbor":
        splits.append(("base", opt.warm_start.n_base))
    for split, n in splits:
        batch = family.sample(n, split)
        if batch.z_star is None and _needs_solutions(config):
            log.info("solving %d %s instances to high accuracy", n, split)
            batch = InstanceBatch(batch.x, family.solve(batch.x))
        save_split(run, split, batch)


def stage_run(run: Run) -> None:
    if run.learned:
        raise WrongStage("run applies to classical optimizers; learned configs use train")
    config = run.config
    family = build_family(config)
    op = build_operator(config, family)
    batch = load_split(run, "train")
    z0 = None
    if config.optimizer.warm_start.kind == "nearest_neighbor":
        base = load_split(run, "base")
        z0 = warmstart_provider(base.x, base.z_star)
    os.makedirs(run.path("traces"), exist_ok=True)
    nonfinite = {}
    for metric in config.bounds.metrics:
        trace = run_trace(
            op, batch.x, config.bounds.k_max, metric, z0, batch.z_star, run.strict_finite, run.threads
        )
        with open(run.path("traces", f"{metric}.fptr"), "wb") as fh:
            fh.write(trace.to_bytes())
        if trace.nonfinite:
            nonfinite[metric] = list(trace.nonfinite)
    run.manifest["nonfinite_instances"] = nonfinite


def stage_certify(run: Run) -> None:
    if run.learned:
        raise WrongStage("certify applies to classical optimizers; learned configs use calibrate")
    run.need("run")
    b = run.config.bounds
    certs = []
    for metric in b.metrics:
        path = run.path("traces", f"{metric}.fptr")
        with open(path, "rb") as fh:
            trace = TraceTensor.from_bytes(fh.read())
        if trace.k_max != b.k_max:
            raise StageError(f"{path} has k_max={trace.k_max}, config has {b.k_max}")
        c, _, _ = certify_classical(trace, b.tolerances[metric].values(), b.delta, (), b.iteration_set())
        certs += c
    acct = _accounting(run, 0.0, 1, None)
    report.write_certificates(certs, run.out)
    report.write_ledger(_ledger_sections(acct), run.out)
    run.manifest["accounting"] = acct


def _calibration_groups(config: RunConfig) -> dict:
    """Metrics sharing a tolerance grid are calibrated from the same rollouts."""
    groups = defaultdict(list)
    for metric in config.bounds.metrics:
        groups[tuple(config.bounds.tolerances[metric].values().tolist())].append(metric)
    return groups


def _distance_bound(config: RunConfig, family, arch, spec) -> Optional[tuple[float, float]]:
    opt = config.optimizer
    if opt.arch != "l2ws" or opt.distance_bound_delta is None:
        return None
    x_bar, z_bar = family.sup_norms()
    a = l2ws_distance_bound(arch, spec.w, spec.s, x_bar, z_bar, opt.distance_bound_delta)
    return a, opt.distance_bound_delta


def _calibrate(run: Run, arch, spec, batch, metrics, tolerances, ks, quantiles, dist_bound):
    config = run.config
    cal = CalibrationConfig(
        H=config.optimizer.H,
        delta=config.bounds.delta,
        omega=config.bounds.omega,
        tolerances=tolerances,
        ks=ks,
        metrics=tuple(metrics),
        seed=config.seed,
        strict_finite=run.strict_finite,
        threads=run.threads,
    )
    n_bt = len(config.optimizer.train.b_targets)
    return certify_learned(spec, arch, batch, cal, prior_grid(config), quantiles, n_bt, dist_bound)


def stage_train(run: Run) -> None:
    if not run.learned:
        raise WrongStage("train applies to learned optimizers; classical configs use run")
    config = run.config
    opt, t = config.optimizer, config.optimizer.train
    family = build_family(config)
    arch = build_learned(config, family)
    batch = load_split(run, "train")
    base = TrainConfig(
        b_target=t.b_targets[0],
        mu=t.mu,
        learning_rate=t.learning_rate,
        epochs=t.epochs,
        batch_size=t.batch_size,
        grid=prior_grid(config),
        delta=config.bounds.delta,
        seed=config.seed,
        loss_id=t.loss,
        s0=t.s0,
    )
    select_k = config.bounds.k_max if t.select_k is None else t.select_k
    select_metric = config.bounds.metrics[0]
    tolerances = tuple(config.bounds.tolerances[select_metric].values().tolist())

    def score(res) -> float:
        bundle = _calibrate(run, arch, res.spec, batch, (select_metric,), tolerances, (select_k,), (t.select_quantile,), None)
        eps = bundle.quantiles[0].epsilon_bound
        return math.inf if eps is None else eps

    try:
        if len(t.b_targets) == 1:
            best = train_pacbayes(arch, batch, base)
            scores = [math.nan]
            best_index = 0
        else:
            cv = crossval_btarget(arch, batch, base, t.b_targets, score)
            best, scores, best_index = cv.best, cv.scores, cv.best_index
    except TrainingAborted as exc:
        with open(run.path("posterior_partial.json"), "w") as fh:
            fh.write(posterior_to_json(arch, exc.result.spec, base.grid))
        write_training_log(run.path("training_log.csv"), exc.result.log)
        raise
    with open(run.path("posterior.json"), "w") as fh:
        fh.write(posterior_to_json(arch, best.spec, base.grid))
    write_training_log(run.path("training_log.csv"), best.log)
    with open(run.path("crossval.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("b_target", "score", "selected"))
        for i, (bt, sc) in enumerate(zip(t.b_targets, scores)):
            w.writerow((report.fmt(bt), "" if math.isnan(sc) else report.fmt(sc), int(i == best_index)))
    run.manifest["selected_b_target"] = float(t.b_targets[best_index])


def stage_calibrate(run: Run) -> None:
    if not run.learned:
        raise WrongStage("calibrate applies to learned optimizers; classical configs use certify")
    run.need("train")
    config = run.config
    family = build_family(config)
    arch = build_learned(config, family)
    with open(run.path("posterior.json")) as fh:
        arch_id, _, spec, _ = posterior_from_json(fh.read())
    if arch_id != arch.arch_id or spec.w.size != arch.n_params:
        raise StageError("posterior.json does not match the configured architecture")
    batch = load_split(run, "train")
    dist_bound = _distance_bound(config, family, arch, spec)
    certs, nonfinite = [], {}
    B_star = None
    for tolerances, metrics in _calibration_groups(config).items():
        bundle = _calibrate(run, arch, spec, batch, metrics, tolerances, config.bounds.iteration_set(), (), dist_bound)
        certs += bundle.certificates
        B_star = bundle.B_star
        for metric, grid in bundle.grids.items():
            if grid.nonfinite:
                nonfinite[metric] = [list(p) for p in grid.nonfinite]
    acct = _accounting(run, config.bounds.omega, len(config.optimizer.train.b_targets), None if dist_bound is None else dist_bound[1])
    report.write_certificates(certs, run.out)
    report.write_ledger(_ledger_sections(acct), run.out)
    run.manifest["accounting"] = acct
    run.manifest["B_star"] = B_star
    run.manifest["distance_bound"] = None if dist_bound is None else dist_bound[0]
    run.manifest["nonfinite_samples"] = nonfinite


def quantile_table(certs, quantiles, acct) -> list[QuantileRow]:
    """Quantile read-offs from the sample-convergence or PAC-Bayes rows."""
    tables: dict[tuple[str, int], dict[float, float]] = defaultdict(dict)
    for c in certs:
        if c.method in ("sample_convergence", "pac_bayes"):
            tables[(c.metric_id, c.k)][c.epsilon] = c.risk_bound
    rows = []
    for (metric, k), table in sorted(tables.items()):
        conf = statement_ledger(acct["delta"], acct["omega"], acct["n_btargets"], acct["n_tolerances"][metric]).confidence
        for q in quantiles:
            rows.append(QuantileRow(metric, k, float(q), quantile_from_grid(table, q), conf))
    return rows


def stage_quantiles(run: Run) -> None:
    run.need("calibrate" if run.learned else "certify")
    certs = report.read_certificates(run.path("certificates.csv"))
    rows = quantile_table(certs, run.config.bounds.quantiles, run.manifest["accounting"])
    report.write_quantiles(rows, run.out)


def stage_report(run: Run) -> None:
    run.need("quantiles")
    config = run.config
    family = build_family(config)
    if run.learned:
        rate = build_learned(config, family).base_operator.rate
    else:
        rate = build_operator(config, family).rate
    certs = report.read_certificates(run.path("certificates.csv"))
    rows = report.read_quantiles(run.path("quantiles.csv"))
    report.emit_plotdata(certs, rows, run.out, rate, config.bounds.k_max)
    problems = report.audit(run.out, run.manifest)
    if problems:
        raise StageError("confidence audit failed: " + "; ".join(problems[:5]))
    run.manifest["audit"] = "ok"


STAGE_FUNCS = {
    "gen": stage_gen,
    "run": stage_run,
    "certify": stage_certify,
    "train": stage_train,
    "calibrate": stage_calibrate,
    "quantiles": stage_quantiles,
    "report": stage_report,
}


def execute(run: Run, stages) -> int:
    pipeline = LEARNED_PIPELINE if run.learned else CLASSICAL_PIPELINE
    for name in stages:
        log.info("stage %s", name)
        if name in pipeline:
            # results of later stages are stale once an earlier one re-runs
            for later in pipeline[pipeline.index(name) :]:
                run.manifest["stages"].pop(later, None)
        try:
            STAGE_FUNCS[name](run)
        except (NonFiniteError, TrainingAborted) as exc:
            run.manifest["stages"][name] = "aborted"
            run.finish("partial", f"{name}: {exc}")
            print(f"fpcert: numeric abort in {name}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except StageError as exc:
            run.manifest["stages"][name] = "failed"
            run.finish("partial", f"{name}: {exc}")
            print(f"fpcert: {name}: {exc}", file=sys.stderr)
            return EXIT_CONFIG if isinstance(exc, WrongStage) else EXIT_FAILURE
        except (OSError, ValueError) as exc:
            run.manifest["stages"][name] = "failed"
            run.finish("partial", f"{name}: {exc}")
            print(f"fpcert: {name} failed: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        run.manifest["stages"][name] = "ok"
    run.finish("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpcert", description=__doc__)
    parser.add_argument("command", choices=STAGES + ("all",))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help="worker threads (default: FPCERT_THREADS or 1)")
    parser.add_argument("--out", help="output directory (default: the config's output_dir)")
    parser.add_argument(
        "--strict-finite",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="abort on non-finite iterates (default) or count them as failures",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = RunConfig.model_validate({**config.model_dump(), "seed": args.seed})
    except ConfigError as exc:
        print(f"fpcert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("fpcert: config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or config.output_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        print(f"fpcert: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    run = Run(config, out, args.threads, args.strict_finite)
    if args.command == "all":
        stages = LEARNED_PIPELINE if run.learned else CLASSICAL_PIPELINE
    else:
        stages = (args.command,)
    return execute(run, stages)


if __name__ == "__main__":
    sys.exit(main())
