"""Experiment dispatch: build problem configs from an ExperimentConfig,
run across seeds, and write the CSV plus JSON summary."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from evograd import tape as tp
from evograd.baselines import ProbeSetup, cost_probe
from evograd.estimator import PerturbationConfig, hypergrad_details
from evograd.harness.config import ExperimentConfig
from evograd.harness.metrics import MetricsRecord, MetricsWriter, fmt, write_json
from evograd.params import HyperParams, ParamVector
from evograd.problems import models, one_d, reweight, rotation
from evograd.rngs import stream

GRID_HEADER = ["lambda", "k", "mean", "std", "oracle"]
COST_HEADER = ["dimension", "point", "method", "tape_nodes", "stored_bytes",
               "forward_passes", "backward_passes", "wall_ms_median"]


@dataclass
class RunResult:
    csv_path: str
    summary_path: str
    summary: dict


def _perturb(cfg: ExperimentConfig, sigma, tau, k, noise) -> PerturbationConfig:
    return PerturbationConfig(
        sigma=cfg.sigma if cfg.sigma is not None else sigma,
        tau=cfg.tau if cfg.tau is not None else tau,
        k=cfg.k[0] if cfg.k else k,
        noise_kind=cfg.noise_kind or noise,
    )


def _out_paths(cfg: ExperimentConfig) -> tuple[str, str]:
    out = cfg.out or f"{cfg.experiment}.csv"
    base = out[:-4] if out.endswith(".csv") else out
    return out, f"{base}.summary.json"


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    runner = {
        "one_d_grid": _run_one_d_grid,
        "one_d_traj": _run_one_d_traj,
        "rotation": _run_rotation,
        "reweight": _run_reweight,
        "scaling": run_sweep,
    }[cfg.experiment]
    return runner(cfg)


# --- 1-d -----------------------------------------------------------------------

def _run_one_d_grid(cfg: ExperimentConfig) -> RunResult:
    """Wide table: one row per (lambda, K) with the estimate's mean/std and
    the closed-form oracle. Statistics use the first seed's streams."""
    ks = cfg.k or (2, 10, 100)
    reps = cfg.reps if cfg.reps is not None else 100
    tau = cfg.tau if cfg.tau is not None else one_d.DEFAULT_TAU
    lams = one_d.GridConfig().lams
    rows = one_d.run_grid(lams, ks, reps, tau, seed=cfg.seeds[0])

    csv_path, summary_path = _out_paths(cfg)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GRID_HEADER)
        for r in rows:
            writer.writerow([fmt(r.lam), r.k, fmt(r.mean), fmt(r.std), fmt(r.oracle)])

    per_k = {}
    for k in ks:
        sub = [r for r in rows if r.k == k]
        means = np.array([r.mean for r in sub])
        oracles = np.array([r.oracle for r in sub])
        per_k[str(k)] = {
            "pearson_vs_oracle": float(np.corrcoef(means, oracles)[0, 1]),
            "mean_abs_deviation": float(np.abs(means - oracles).mean()),
            "mean_std": float(np.mean([r.std for r in sub])),
        }
    summary = {"experiment": "one_d_grid", "reps": reps, "tau": tau, "per_k": per_k}
    write_json(summary_path, summary)
    _maybe_dump_tape(cfg)
    return RunResult(csv_path, summary_path, summary)


def _run_one_d_traj(cfg: ExperimentConfig) -> RunResult:
    traj_cfg = one_d.TrajectoryConfig(
        steps=cfg.steps if cfg.steps is not None else 5,
        lr=cfg.lr if cfg.lr is not None else 0.1,
        k=cfg.k[0] if cfg.k else 100,
        tau=cfg.tau if cfg.tau is not None else one_d.DEFAULT_TAU,
    )
    methods = ("evograd", "oracle") if cfg.method == "evograd" else ("oracle",)

    csv_path, summary_path = _out_paths(cfg)
    endpoint_dx, endpoint_dlam, fval_ok = [], [], []
    with MetricsWriter(csv_path) as writer:
        for seed in cfg.seeds:
            by_method = {}
            for method in methods:
                points = one_d.run_trajectories(traj_cfg, seed, method=method)
                by_method[method] = points
                for p in points:
                    writer.write(MetricsRecord(
                        run_id=f"{method}-start{p.start_index}", seed=seed, step=p.step,
                        extra={"x": p.x, "lambda": p.lam, "f_val": p.f_val}))
            for method, points in by_method.items():
                start = {p.start_index: p.f_val for p in points if p.step == 0}
                end = {p.start_index: p.f_val for p in points if p.step == traj_cfg.steps}
                fval_ok.append(all(end[i] <= start[i] for i in start))
            if len(by_method) == 2:
                ee = {p.start_index: p for p in by_method["evograd"] if p.step == traj_cfg.steps}
                oe = {p.start_index: p for p in by_method["oracle"] if p.step == traj_cfg.steps}
                endpoint_dx.append(np.mean([abs(ee[i].x - oe[i].x) for i in ee]))
                endpoint_dlam.append(np.mean([abs(ee[i].lam - oe[i].lam) for i in ee]))

    summary = {"experiment": "one_d_traj", "k": traj_cfg.k, "steps": traj_cfg.steps,
               "all_f_val_non_increasing": bool(all(fval_ok))}
    if endpoint_dx:
        summary["mean_endpoint_dx"] = float(np.mean(endpoint_dx))
        summary["mean_endpoint_dlam"] = float(np.mean(endpoint_dlam))
    write_json(summary_path, summary)
    _maybe_dump_tape(cfg)
    return RunResult(csv_path, summary_path, summary)


# --- rotation / reweighting ------------------------------------------------------

def _write_training_records(writer, run_id, seed, records, finals: dict):
    for step, info in enumerate(records):
        writer.write(MetricsRecord(
            run_id=run_id, seed=seed, step=step,
            loss_train=info.loss_train, loss_val=info.loss_val,
            hypergrad_norm=info.hypergrad_norm,
            tape_nodes=info.tape_nodes or None, stored_bytes=info.stored_bytes or None,
            forward_passes=info.forward_passes, backward_passes=info.backward_passes))
    writer.write(MetricsRecord(run_id=run_id, seed=seed, step=len(records) - 1,
                               extra=finals))


def _rotation_config(cfg: ExperimentConfig) -> rotation.RotationConfig:
    return rotation.RotationConfig(
        n_train=cfg.n_train if cfg.n_train is not None else 2000,
        true_angle=cfg.true_angle if cfg.true_angle is not None else 30.0,
        steps=cfg.steps if cfg.steps is not None else 400,
        lr=cfg.lr if cfg.lr is not None else 1e-3,
        meta_lr=cfg.meta_lr if cfg.meta_lr is not None else 1e-2,
        method=cfg.method,
        perturb=_perturb(cfg, sigma=0.001, tau=0.05, k=2, noise="sign-gaussian"),
    )


def _run_rotation(cfg: ExperimentConfig) -> RunResult:
    pcfg = _rotation_config(cfg)
    csv_path, summary_path = _out_paths(cfg)
    angles, accuracies = [], []
    with MetricsWriter(csv_path) as writer:
        for seed in cfg.seeds:
            out = rotation.run_rotation_experiment(pcfg, seed)
            finals = {"accuracy": out.test_accuracy}
            if cfg.method == "evograd":
                finals["lambda"] = out.final_angle
                angles.append(out.final_angle)
            accuracies.append(out.test_accuracy)
            _write_training_records(writer, f"rotation-{cfg.method}-s{seed}",
                                    seed, out.records, finals)

    summary = {"experiment": "rotation", "method": cfg.method,
               "true_angle": pcfg.true_angle,
               "accuracy": _mean_std(accuracies)}
    if angles:
        summary["learned_angle"] = _mean_std(angles)
    write_json(summary_path, summary)
    _maybe_dump_tape(cfg)
    return RunResult(csv_path, summary_path, summary)


def _reweight_config(cfg: ExperimentConfig) -> reweight.ReweightConfig:
    return reweight.ReweightConfig(
        n_train=cfg.n_train if cfg.n_train is not None else 400,
        rho=cfg.rho if cfg.rho is not None else 0.4,
        steps=cfg.steps if cfg.steps is not None else 4000,
        warmup_steps=cfg.warmup_steps if cfg.warmup_steps is not None else 800,
        lr=cfg.lr if cfg.lr is not None else 5e-4,
        meta_lr=cfg.meta_lr if cfg.meta_lr is not None else 5e-3,
        method=cfg.method,
        perturb=_perturb(cfg, sigma=0.001, tau=0.05, k=2, noise="sign-gaussian"),
    )


def _run_reweight(cfg: ExperimentConfig) -> RunResult:
    pcfg = _reweight_config(cfg)
    csv_path, summary_path = _out_paths(cfg)
    accs, w_clean, w_bad = [], [], []
    with MetricsWriter(csv_path) as writer:
        for seed in cfg.seeds:
            out = reweight.run_reweight_experiment(pcfg, seed)
            finals = {"accuracy": out.test_accuracy}
            if cfg.method == "evograd":
                finals["mean_weight_clean"] = out.mean_weight_clean
                w_clean.append(out.mean_weight_clean)
                if math.isfinite(out.mean_weight_corrupted):
                    finals["mean_weight_corrupted"] = out.mean_weight_corrupted
                    w_bad.append(out.mean_weight_corrupted)
            accs.append(out.test_accuracy)
            _write_training_records(writer, f"reweight-{cfg.method}-s{seed}",
                                    seed, out.records, finals)

    summary = {"experiment": "reweight", "method": cfg.method, "rho": pcfg.rho,
               "accuracy": _mean_std(accs)}
    if w_clean:
        summary["mean_weight_clean"] = _mean_std(w_clean)
    if w_bad:
        summary["mean_weight_corrupted"] = _mean_std(w_bad)
    write_json(summary_path, summary)
    _maybe_dump_tape(cfg)
    return RunResult(csv_path, summary_path, summary)


def _mean_std(values) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)}


# --- scaling sweeps ---------------------------------------------------------------

def _width_setup(mult: int, cfg: ExperimentConfig) -> ProbeSetup:
    data_rng = stream(0, "data")
    task = rotation.gen_rotated_digits(800, 30.0, data_rng)
    theta = models.init_mlp(stream(0, "init"), [2, 32 * mult, 4])
    x, y = task.train
    xv, yv = task.val

    def batches(rng, step):
        bi = rng.integers(0, len(x), 128)
        vi = rng.integers(0, len(xv), 128)
        return (x[bi], y[bi]), (xv[vi], yv[vi])

    return ProbeSetup(theta=theta, hyper=HyperParams.scalar(0.3, name="angle"),
                      train_loss_fn=rotation.train_loss, val_loss_fn=rotation.val_loss,
                      batches=batches, theta_lr=1e-3, hyper_lr=1e-2,
                      perturb=_perturb(cfg, 0.001, 0.05, 2, "sign-gaussian"))


def _reweight_probe_setup(cfg: ExperimentConfig, weightnet_hidden: int,
                          k: int, classifier_hidden: int = 512) -> ProbeSetup:
    data_rng = stream(0, "data")
    task = reweight.gen_noisy_classification(400, 2, 0.4, data_rng)
    init_rng = stream(0, "init")
    theta = models.init_mlp(init_rng, [20, classifier_hidden, classifier_hidden, 2])
    weightnet = models.init_weightnet(init_rng, weightnet_hidden)
    x, y = task.train
    xv, yv = task.val

    def batches(rng, step):
        bi = rng.integers(0, len(x), 32)
        vi = rng.integers(0, len(xv), 32)
        return (x[bi], y[bi]), (xv[vi], yv[vi])

    perturb = PerturbationConfig(
        sigma=cfg.sigma if cfg.sigma is not None else 0.001,
        tau=cfg.tau if cfg.tau is not None else 0.05,
        k=k, noise_kind=cfg.noise_kind or "sign-gaussian")
    return ProbeSetup(theta=theta, hyper=HyperParams.network(weightnet),
                      train_loss_fn=reweight.train_loss, val_loss_fn=reweight.val_loss,
                      batches=batches, theta_lr=5e-4, hyper_lr=5e-3, perturb=perturb)


def run_sweep(cfg: ExperimentConfig) -> RunResult:
    """Cost rows per grid point; see COST_HEADER for the schema.

    Wall-clock medians in this file are the one output not covered by the
    byte-reproducibility contract; structural columns are deterministic.
    """
    steps = cfg.probe_steps
    points: list[tuple[int, str, object]] = []
    if cfg.sweep_dimension == "model_width":
        for m in cfg.sweep_grid:
            setup = _width_setup(m, cfg)
            points.append((m, "evograd", setup))
            points.append((m, "t1t2", setup))
    elif cfg.sweep_dimension == "hyperparam_count":
        for count in cfg.sweep_grid:
            hidden = max(1, int(count) // 3)
            setup = _reweight_probe_setup(cfg, weightnet_hidden=hidden, k=2)
            points.append((count, "evograd", setup))
            points.append((count, "t1t2", setup))
    else:  # population_k
        for k in cfg.sweep_grid:
            setup = _reweight_probe_setup(cfg, weightnet_hidden=32, k=int(k))
            points.append((k, "evograd", setup))

    csv_path, summary_path = _out_paths(cfg)
    reports = []
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COST_HEADER)
        for point, method, setup in points:
            report = cost_probe(method, setup, steps=steps, seed=cfg.seeds[0])
            reports.append((point, report))
            writer.writerow([cfg.sweep_dimension, point, method,
                             report.tape_nodes, report.stored_bytes,
                             report.forward_passes, report.backward_passes,
                             f"{report.wall_ms_median:.3f}"])

    summary = {"experiment": "scaling", "dimension": cfg.sweep_dimension,
               "grid": list(cfg.sweep_grid), "probe_steps": steps,
               "rows": [{"point": p, "method": r.method,
                         "tape_nodes": r.tape_nodes, "stored_bytes": r.stored_bytes,
                         "forward_passes": r.forward_passes,
                         "backward_passes": r.backward_passes,
                         "wall_ms_median": r.wall_ms_median}
                        for p, r in reports]}
    if cfg.sweep_dimension == "model_width":
        gaps = {}
        for p, r in reports:
            gaps.setdefault(p, {})[r.method] = r.stored_bytes
        ordered = [gaps[p]["t1t2"] - gaps[p]["evograd"] for p in sorted(gaps)]
        summary["bytes_gap_by_width"] = ordered
        summary["gap_non_decreasing"] = bool(
            all(b >= a for a, b in zip(ordered, ordered[1:])))
    write_json(summary_path, summary)
    return RunResult(csv_path, summary_path, summary)


# --- tape dump --------------------------------------------------------------------

def _maybe_dump_tape(cfg: ExperimentConfig):
    """Write the line-per-node dump of one freshly recorded estimate tape."""
    if not cfg.dump_tape:
        return
    seed = cfg.seeds[0]
    if cfg.experiment.startswith("one_d"):
        theta_rng = stream(seed, "data")
        theta = ParamVector([("x", np.asarray(theta_rng.normal()))])
        hyper = HyperParams.scalar(1.0, name="lam")
        res = hypergrad_details(theta, hyper, None, None, one_d.train_loss, one_d.val_loss,
                                PerturbationConfig(sigma=1.0, tau=0.5, k=cfg.k[0] if cfg.k else 2,
                                                   noise_kind="gaussian"),
                                stream(seed, "noise"))
    elif cfg.experiment == "rotation":
        task = rotation.gen_rotated_digits(200, 30.0, stream(seed, "data"))
        theta = models.init_mlp(stream(seed, "init"), [2, 8, 4])
        x, y = task.train
        xv, yv = task.val
        res = hypergrad_details(theta, HyperParams.scalar(0.0, name="angle"),
                                (x[:32], y[:32]), (xv[:32], yv[:32]),
                                rotation.train_loss, rotation.val_loss,
                                _perturb(cfg, 0.001, 0.05, 2, "sign-gaussian"),
                                stream(seed, "noise"))
    else:
        task = reweight.gen_noisy_classification(200, 2, 0.4, stream(seed, "data"))
        init_rng = stream(seed, "init")
        theta = models.init_mlp(init_rng, [20, 16, 2])
        weightnet = models.init_weightnet(init_rng, 8)
        x, y = task.train
        xv, yv = task.val
        res = hypergrad_details(theta, HyperParams.network(weightnet),
                                (x[:32], y[:32]), (xv[:32], yv[:32]),
                                reweight.train_loss, reweight.val_loss,
                                _perturb(cfg, 0.001, 0.05, 2, "sign-gaussian"),
                                stream(seed, "noise"))
    with open(cfg.dump_tape, "w", encoding="utf-8") as fh:
        fh.write(res.tape.dump())
        fh.write("\n")
