"""Reference hypergradients and cost probes.

Two references are provided for judging the population estimator. For the
1-d problem there is a closed-form oracle. For general problems there is
the classic one-step approximation ``direct - dl_V/dtheta . d2l_T/dtheta
dlambda^T``, realised here without any second-order autodiff: the
vector-Hessian product is taken by central finite differences of the
first-order gradient ``dl_T/dlambda`` at two points ``theta +/- delta
v_hat``. The engine therefore stays first-order while the baseline stays
numerically honest (its FD error is pinned down by the polynomial tests).

Cost probes compare what each method retains for its hypergradient
computation. The population path's retention is simply its recording
tape. For the one-step baseline the FD execution retains almost nothing,
which would misrepresent what a second-order implementation pays, so the
probe instead *records* the graph such an implementation keeps: the
training forward pass, the gradient of the training loss written out as
forward operations (``record_gradient_extension``), the one-step
parameter update, and the validation forward pass at the updated
parameters. That tape is measured, never differentiated through.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from evograd import tape as tp
from evograd.estimator import (
    MetaState,
    MetaStepConfig,
    PerturbationConfig,
    meta_step,
)
from evograd.optim import SGD
from evograd.params import HyperParams, ParamVector


def oracle_hypergrad_1d(lam: float) -> float:
    """Closed-form hypergradient of the 1-d problem at the inner optimum.

    Valid for lam > -1, where the inner training loss has a minimiser;
    lam = -1 is a pole.
    """
    lam = float(lam)
    if lam <= -1.0:
        raise ValueError(f"hypergradient undefined for lam <= -1 (pole at -1), got {lam}")
    return (lam - 1.0) / (lam + 1.0) ** 3


@dataclass
class T1T2Config:
    """Finite-difference step and the implicit unit inner step of the baseline."""

    fd_delta: float = 1e-5
    inner_lr: float = 1.0

    def __post_init__(self):
        if not self.fd_delta > 0:
            raise ValueError(f"fd_delta must be > 0, got {self.fd_delta}")


def _grad_wrt_hyper(theta: ParamVector, hyper: HyperParams, train_loss_fn, batch) -> np.ndarray:
    """dl_T/d(hyper) at fixed theta; one forward + one backward on a fresh tape."""
    t = tp.Tape()
    pv = {n: t.leaf(v, requires_grad=False) for n, v in theta.segments}
    hv = {n: t.leaf(v) for n, v in hyper.structure.segments}
    loss = train_loss_fn(t, pv, hv, batch)
    tp.count_forward()
    grads = tp.backward(t, loss, [hv[n] for n, _ in hyper.structure.segments])
    return np.concatenate([g.ravel() for g in grads])


def t1t2_hypergrad(theta: ParamVector, hyper: HyperParams, train_batch, val_batch,
                   train_loss_fn, val_loss_fn, cfg: T1T2Config = None) -> np.ndarray:
    """One-step hypergradient: direct term minus the projected mixed partial.

    Computes ``v = dl_V/dtheta`` by an ordinary backward, then the
    vector-Hessian product ``v^T d2l_T/dtheta dlambda^T`` as
    ``(dl_T/dlambda|_{theta+delta*v_hat} - dl_T/dlambda|_{theta-delta*v_hat})
    * ||v|| / (2 delta)``, and returns ``direct - inner_lr * product``.
    A flat validation loss (``||v|| = 0``) contributes nothing.
    """
    cfg = cfg or T1T2Config()

    t = tp.Tape()
    pv = {n: t.leaf(v) for n, v in theta.segments}
    hv = {n: t.leaf(v) for n, v in hyper.structure.segments}
    val_loss = val_loss_fn(t, pv, hv, val_batch)
    tp.count_forward()
    names = theta.names()
    hyper_names = [n for n, _ in hyper.structure.segments]
    grads = tp.backward(t, val_loss, [pv[n] for n in names] + [hv[n] for n in hyper_names])
    v = np.concatenate([g.ravel() for g in grads[:len(names)]])
    direct = np.concatenate([g.ravel() for g in grads[len(names):]])

    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return direct

    vhat = theta.unflatten(v / vnorm)
    theta_plus = theta.zip_map(vhat, lambda p, d: p + cfg.fd_delta * d)
    theta_minus = theta.zip_map(vhat, lambda p, d: p - cfg.fd_delta * d)
    h_plus = _grad_wrt_hyper(theta_plus, hyper, train_loss_fn, train_batch)
    h_minus = _grad_wrt_hyper(theta_minus, hyper, train_loss_fn, train_batch)
    product = (h_plus - h_minus) * vnorm / (2.0 * cfg.fd_delta)
    return direct - cfg.inner_lr * product


# --- recording gradients as forward operations ---------------------------------

def _ac(tape, acc, idx, grad_var):
    """Accumulate a gradient contribution; fan-in records an add node."""
    if idx in acc:
        acc[idx] = tp.add(acc[idx], grad_var)
    else:
        acc[idx] = grad_var


def record_gradient_extension(tape: tp.Tape, root: tp.Var, wrt: list[tp.Var]) -> list[tp.Var]:
    """Append nodes computing d(root)/d(each wrt) to the same tape.

    This writes the reverse sweep out as ordinary forward operations --
    the graph a second-order implementation would retain. It exists for
    graph-size measurement (and is value-checked against ``backward`` in
    the tests); estimator code never differentiates through it, which is
    what keeps this package first-order.
    """
    if root.shape != ():
        raise tp.NonScalarRoot("gradient extension requires a scalar root")
    acc: dict[int, tp.Var] = {root.idx: tape.constant(1.0)}
    needed = tape.ancestors(root.idx)

    for idx in sorted(needed, reverse=True):
        g = acc.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        op, parents = node.op, node.parents
        if op == "leaf":
            continue
        pvars = [tp.Var(tape, p) for p in parents]

        if op == "add":
            _ac(tape, acc, parents[0], g)
            _ac(tape, acc, parents[1], g)
        elif op == "sub":
            _ac(tape, acc, parents[0], g)
            _ac(tape, acc, parents[1], tp.scalar_mul(-1.0, g))
        elif op == "mul":
            _ac(tape, acc, parents[0], tp.mul(g, pvars[1]))
            _ac(tape, acc, parents[1], tp.mul(g, pvars[0]))
        elif op == "scalar_mul":
            if len(parents) == 1:
                _ac(tape, acc, parents[0], tp.scalar_mul(node.meta["const"], g))
            else:
                _ac(tape, acc, parents[0], tp.sum(tp.mul(g, pvars[1])))
                _ac(tape, acc, parents[1], tp.scalar_mul(pvars[0], g))
        elif op == "matmul":
            ta, tb = node.meta.get("ta", False), node.meta.get("tb", False)
            a, b = pvars
            if not ta:
                da = tp.matmul(g, b, transpose_b=not tb)
            else:
                da = tp.matmul(b, g, transpose_a=tb, transpose_b=True)
            if not tb:
                db = tp.matmul(a, g, transpose_a=not ta)
            else:
                db = tp.matmul(g, a, transpose_a=True, transpose_b=ta)
            _ac(tape, acc, parents[0], da)
            _ac(tape, acc, parents[1], db)
        elif op == "relu":
            mask = tape.constant((pvars[0].value > 0).astype(float))
            _ac(tape, acc, parents[0], tp.mul(g, mask))
        elif op == "sigmoid":
            y = tp.Var(tape, idx)
            one = tape.constant(np.ones(node.value.shape))
            _ac(tape, acc, parents[0], tp.mul(g, tp.mul(y, tp.sub(one, y))))
        elif op == "softmax":
            if node.value.ndim != 1:
                raise NotImplementedError("gradient extension: softmax over rows")
            y = tp.Var(tape, idx)
            dot = tp.sum(tp.mul(g, y))
            spread = tp.scalar_mul(dot, tape.constant(np.ones(node.value.shape)))
            _ac(tape, acc, parents[0], tp.mul(y, tp.sub(g, spread)))
        elif op == "cross_entropy":
            targets = node.meta["targets"]
            logits = pvars[0]
            two_d = logits.value.reshape(1, -1) if logits.value.ndim == 1 else logits.value
            n, c = two_d.shape
            onehot = np.zeros((n, c))
            onehot[np.arange(n), targets] = 1.0
            sm = tp.softmax(logits)
            diff = tp.sub(sm, tape.constant(onehot.reshape(logits.shape)))
            if node.meta["reduction"] == "mean":
                _ac(tape, acc, parents[0], tp.scalar_mul(1.0 / n, tp.scalar_mul(g, diff)))
            else:
                gcol = tp.reshape(g, (n, 1))
                gfull = tp.matmul(gcol, tape.constant(np.ones((1, c))))
                _ac(tape, acc, parents[0], tp.mul(tp.reshape(gfull, logits.shape), diff))
        elif op == "mse":
            n = node.meta["n"]
            if len(parents) == 1:
                d = tp.sub(pvars[0], tape.constant(np.broadcast_to(
                    node.meta["target"], pvars[0].shape).copy()))
            else:
                d = tp.sub(pvars[0], pvars[1])
            scaled = tp.scalar_mul(g, tp.scalar_mul(2.0 / n, d))
            _ac(tape, acc, parents[0], scaled)
            if len(parents) == 2:
                _ac(tape, acc, parents[1], tp.scalar_mul(-1.0, scaled))
        elif op == "sum":
            ones = tape.constant(np.ones(pvars[0].shape))
            _ac(tape, acc, parents[0], tp.scalar_mul(g, ones))
        elif op == "mean":
            k = pvars[0].value.size
            ones = tape.constant(np.full(pvars[0].shape, 1.0 / k))
            _ac(tape, acc, parents[0], tp.scalar_mul(g, ones))
        elif op == "reshape":
            _ac(tape, acc, parents[0], tp.reshape(g, pvars[0].shape))
        elif op == "rotate2d":
            if len(parents) == 1:
                th = node.meta["angle"]
                pts_idx = parents[0]
            else:
                th = float(pvars[0].value)
                pts_idx = parents[1]
                pts = tp.Var(tape, pts_idx)
                cs, sn = np.cos(th), np.sin(th)
                drot_t = np.array([[-sn, cs], [-cs, -sn]])
                _ac(tape, acc, parents[0],
                    tp.sum(tp.mul(g, tp.matmul(pts, tape.constant(drot_t)))))
            cs, sn = np.cos(th), np.sin(th)
            rot = np.array([[cs, -sn], [sn, cs]])
            _ac(tape, acc, pts_idx, tp.matmul(g, tape.constant(rot)))
        else:
            raise NotImplementedError(f"gradient extension: operator {op!r}")

    out = []
    for v in wrt:
        gv = acc.get(v.idx)
        out.append(gv if gv is not None else tape.constant(np.zeros(v.shape)))
    return out


def record_unrolled_t1t2_tape(theta: ParamVector, hyper: HyperParams, train_batch, val_batch,
                              train_loss_fn, val_loss_fn, inner_lr: float = 1.0) -> tp.Tape:
    """The graph a second-order one-step implementation retains.

    Training forward at (theta, hyper) -> gradient of the training loss
    written out as recorded operations -> one-step updated parameters ->
    validation forward at the updated parameters. Returned for
    measurement only.
    """
    t = tp.Tape()
    pv = {n: t.leaf(v) for n, v in theta.segments}
    hv = {n: t.leaf(v) for n, v in hyper.structure.segments}
    train_loss = train_loss_fn(t, pv, hv, train_batch)
    names = theta.names()
    grad_vars = record_gradient_extension(t, train_loss, [pv[n] for n in names])
    updated = {}
    for name, gvar in zip(names, grad_vars):
        updated[name] = tp.sub(pv[name], tp.scalar_mul(inner_lr, gvar))
    val_loss_fn(t, updated, hv, val_batch)
    return t


# --- cost probing ---------------------------------------------------------------

@dataclass
class ProbeSetup:
    """Everything a cost probe needs to run one method on one problem."""

    theta: ParamVector
    hyper: HyperParams
    train_loss_fn: object
    val_loss_fn: object
    batches: object                       # fn(rng, step) -> (train_batch, val_batch)
    theta_lr: float = 0.01
    hyper_lr: float = 0.01
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    t1t2: T1T2Config = field(default_factory=T1T2Config)


@dataclass
class CostReport:
    method: str
    steps: int
    tape_nodes: int              # retained hypergradient graph, nodes
    stored_bytes: int            # retained hypergradient graph, value bytes
    forward_passes: int          # per meta-step
    backward_passes: int         # per meta-step
    wall_ms_median: float

    def csv_row(self) -> dict:
        return {
            "method": self.method,
            "steps": self.steps,
            "tape_nodes": self.tape_nodes,
            "stored_bytes": self.stored_bytes,
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
            "wall_ms_median": f"{self.wall_ms_median:.3f}",
        }


def cost_probe(method: str, setup: ProbeSetup, steps: int, seed: int = 0) -> CostReport:
    """Run ``steps`` meta-iterations of one method and report its costs.

    Wall time is a monotonic-clock median over the meta-steps only.
    Structural quantities (graph sizes, pass counts) depend on shapes and
    method, not on the seed.
    """
    rng = np.random.default_rng(seed)
    if method == "evograd":
        state = MetaState(theta=setup.theta.copy(),
                          hyper=HyperParams.from_structure(setup.hyper.structure.copy(),
                                                           setup.hyper.role),
                          opt_theta=SGD(setup.theta_lr), opt_hyper=SGD(setup.hyper_lr))
        cfg = MetaStepConfig(perturb=setup.perturb)
        times, nodes, stored, fwd, bwd = [], 0, 0, 0, 0
        for step in range(steps):
            tb, vb = setup.batches(rng, step)
            t0 = time.perf_counter()
            info = meta_step(state, tb, vb, setup.train_loss_fn, setup.val_loss_fn, cfg, rng)
            times.append((time.perf_counter() - t0) * 1e3)
            nodes = max(nodes, info.tape_nodes)
            stored = max(stored, info.stored_bytes)
            fwd, bwd = info.forward_passes, info.backward_passes
        return CostReport("evograd", steps, nodes, stored, fwd, bwd, median(times))

    if method == "t1t2":
        theta = setup.theta.copy()
        hyper = HyperParams.from_structure(setup.hyper.structure.copy(), setup.hyper.role)
        opt_theta, opt_hyper = SGD(setup.theta_lr), SGD(setup.hyper_lr)
        times, fwd, bwd = [], 0, 0
        for step in range(steps):
            tb, vb = setup.batches(rng, step)
            t0 = time.perf_counter()
            with tp.measure_passes() as meter:
                t = tp.Tape()
                pv = {n: t.leaf(v) for n, v in theta.segments}
                hv = {n: t.leaf(v, requires_grad=False) for n, v in hyper.structure.segments}
                loss = setup.train_loss_fn(t, pv, hv, tb)
                tp.count_forward()
                names = theta.names()
                grads = tp.backward(t, loss, [pv[n] for n in names])
                theta = opt_theta.step(theta, ParamVector(list(zip(names, grads))))

                hgrad = t1t2_hypergrad(theta, hyper, tb, vb, setup.train_loss_fn,
                                       setup.val_loss_fn, setup.t1t2)
                new_struct = opt_hyper.step(hyper.structure, hyper.structure.unflatten(hgrad))
                hyper = HyperParams.from_structure(new_struct, hyper.role)
            times.append((time.perf_counter() - t0) * 1e3)
            fwd, bwd = meter.forward_passes, meter.backward_passes

        tb, vb = setup.batches(np.random.default_rng(seed), 0)
        retained = record_unrolled_t1t2_tape(setup.theta, setup.hyper, tb, vb,
                                             setup.train_loss_fn, setup.val_loss_fn)
        n, s = tp.tape_stats(retained)
        return CostReport("t1t2", steps, n, s, fwd, bwd, median(times))

    raise ValueError(f"unknown method {method!r} (expected evograd or t1t2)")
