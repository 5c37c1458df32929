"""The 1-d bilevel problem.

Training loss ``f_T(x, lam) = (x - 1)^2 + lam * x^2`` with validation loss
``f_V(x) = (x - 0.5)^2``. The inner minimiser is ``x*(lam) = 1/(1 + lam)``
and the hypergradient at it has the closed form exposed by
``baselines.oracle_hypergrad_1d``, which makes this the one problem where
the estimator can be judged against ground truth.

Two estimate paths are provided. ``hypergrad_estimate`` evaluates the
whole candidate population as one (K,)-shaped tape computation, which is
what the dense grid and variance studies run on. ``general_estimate``
wires the same problem through the generic estimator; with a common seed
the two consume identical noise and agree to float precision (covered in
the tests).

Grid mode draws a fresh ``x ~ N(0, 1)`` per repetition and reports the
estimate's mean and spread per (lam, K) against the oracle. Trajectory
mode runs the joint SGD recursion: an exact inner step on ``x``, then a
hyperparameter step on ``lam`` using either the estimate or the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evograd import tape as tp
from evograd.baselines import oracle_hypergrad_1d
from evograd.estimator import PerturbationConfig, evograd_hypergrad
from evograd.params import HyperParams, ParamVector
from evograd.rngs import stream

DEFAULT_TAU = 0.5
DEFAULT_TRAJECTORY_STARTS = (
    (2.0, 2.0),
    (-1.5, 1.5),
    (1.8, 0.6),
    (-0.8, 1.0),
    (2.5, 1.2),
)


def f_train(x, lam):
    return (x - 1.0) ** 2 + lam * x * x


def f_val(x):
    return (x - 0.5) ** 2


def train_loss(tape, params, hyper, batch):
    x = params["x"]
    d = tp.sub(x, tape.constant(np.ones(())))
    return tp.add(tp.mul(d, d), tp.scalar_mul(hyper["lam"], tp.mul(x, x)))


def val_loss(tape, params, hyper, batch):
    d = tp.sub(params["x"], tape.constant(np.asarray(0.5)))
    return tp.mul(d, d)


def hypergrad_estimate(lam: float, x: float, k: int, tau: float,
                       rng: np.random.Generator) -> float:
    """One population estimate of df_V/dlam at (x, lam), candidates batched.

    Perturbations are unit gaussians here: the candidates must explore the
    scalar landscape, unlike the tiny perturbations used for networks.
    """
    eps = rng.normal(size=k)
    t = tp.Tape()
    lam_var = t.leaf(np.asarray(float(lam)))
    xk = t.constant(x + eps)
    tp.count_forward(k)
    d = tp.sub(xk, t.constant(np.ones(k)))
    losses = tp.add(tp.mul(d, d), tp.scalar_mul(lam_var, tp.mul(xk, xk)))
    w = tp.softmax(tp.scalar_mul(-1.0 / tau, losses))
    xstar = tp.sum(tp.mul(w, xk))
    dv = tp.sub(xstar, t.constant(np.asarray(0.5)))
    fv = tp.mul(dv, dv)
    tp.count_forward()
    (g,) = tp.backward(t, fv, [lam_var])
    return float(g)


def general_estimate(lam: float, x: float, k: int, tau: float,
                     rng: np.random.Generator) -> float:
    """The same estimate through the generic estimator (cross-check path)."""
    theta = ParamVector([("x", np.asarray(float(x)))])
    hyper = HyperParams.scalar(lam, name="lam")
    cfg = PerturbationConfig(sigma=1.0, tau=tau, k=k, noise_kind="gaussian")
    g = evograd_hypergrad(theta, hyper, None, None, train_loss, val_loss, cfg, rng)
    return float(g[0])


@dataclass
class GridRow:
    lam: float
    k: int
    mean: float
    std: float
    oracle: float


def run_grid(lams, ks, reps: int, tau: float, seed: int) -> list[GridRow]:
    """Mean/std of the estimate over ``reps`` draws of x per (lam, K).

    The x draws come from the ``data`` stream of ``seed`` and the
    population noise from the ``noise`` stream.
    """
    data_rng = stream(seed, "data")
    noise_rng = stream(seed, "noise")
    rows = []
    for k in ks:
        for lam in lams:
            vals = np.empty(reps)
            for r in range(reps):
                x = data_rng.normal()
                vals[r] = hypergrad_estimate(lam, x, k, tau, noise_rng)
            rows.append(GridRow(lam=float(lam), k=int(k), mean=float(vals.mean()),
                                std=float(vals.std()), oracle=oracle_hypergrad_1d(lam)))
    return rows


@dataclass
class TrajectoryPoint:
    start_index: int
    method: str
    step: int
    x: float
    lam: float
    f_val: float


@dataclass
class TrajectoryConfig:
    starts: tuple = DEFAULT_TRAJECTORY_STARTS
    steps: int = 5
    lr: float = 0.1
    k: int = 100
    tau: float = DEFAULT_TAU


def run_trajectories(cfg: TrajectoryConfig, seed: int,
                     method: str = "evograd") -> list[TrajectoryPoint]:
    """Joint (x, lam) SGD paths from the fixed starts.

    Each step updates x with the exact training-loss gradient, then lam
    with either the population estimate or the closed-form oracle.
    """
    if method not in ("evograd", "oracle"):
        raise ValueError(f"unknown 1-d trajectory method {method!r}")
    noise_rng = stream(seed, "noise")
    points = []
    for i, (x0, lam0) in enumerate(cfg.starts):
        x, lam = float(x0), float(lam0)
        points.append(TrajectoryPoint(i, method, 0, x, lam, f_val(x)))
        for step in range(1, cfg.steps + 1):
            x = x - cfg.lr * (2.0 * (x - 1.0) + 2.0 * lam * x)
            if method == "oracle":
                g = oracle_hypergrad_1d(lam)
            else:
                g = hypergrad_estimate(lam, x, cfg.k, cfg.tau, noise_rng)
            lam = lam - cfg.lr * g
            points.append(TrajectoryPoint(i, method, step, x, lam, f_val(x)))
    return points


@dataclass
class GridConfig:
    lams: tuple = field(default_factory=lambda: tuple(np.round(np.linspace(0.1, 2.0, 100), 10)))
    ks: tuple = (2, 10, 100)
    reps: int = 100
    tau: float = DEFAULT_TAU
