"""Baseline tests: the closed-form 1-d oracle, the FD-based one-step
hypergradient against analytic mixed partials, the recorded gradient
extension against the reverse sweep, and cost-probe structure."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from evograd import tape as tp
from evograd.baselines import (
    CostReport,
    ProbeSetup,
    T1T2Config,
    cost_probe,
    oracle_hypergrad_1d,
    record_gradient_extension,
    record_unrolled_t1t2_tape,
    t1t2_hypergrad,
)
from evograd.estimator import PerturbationConfig, hypergrad_details
from evograd.params import HyperParams, ParamVector


class TestOracle:
    def test_zero_at_one(self):
        assert oracle_hypergrad_1d(1.0) == 0.0

    def test_direct_substitutions(self):
        assert oracle_hypergrad_1d(0.0) == pytest.approx(-1.0)
        assert oracle_hypergrad_1d(3.0) == pytest.approx(2.0 / 64.0)

    def test_pole_rejected(self):
        with pytest.raises(ValueError, match="pole"):
            oracle_hypergrad_1d(-1.0)
        with pytest.raises(ValueError):
            oracle_hypergrad_1d(-2.0)

    @pytest.mark.parametrize("lam", [0.2, 0.5, 1.0, 1.5, 2.0])
    def test_oracle_matches_numeric_bilevel(self, lam):
        # independent route: minimise the training loss numerically, then
        # finite-difference the validation loss of the minimiser over lam.
        def x_star(l):
            res = minimize_scalar(lambda x: (x - 1.0) ** 2 + l * x * x,
                                  bounds=(-10, 10), method="bounded",
                                  options={"xatol": 1e-13})
            return res.x

        h = 1e-4
        fv = lambda l: (x_star(l) - 0.5) ** 2
        numeric = (fv(lam + h) - fv(lam - h)) / (2 * h)
        assert numeric == pytest.approx(oracle_hypergrad_1d(lam), abs=1e-4)


# --- scalar quadratic problem for the analytic mixed-partial checks -----------

def _quad_train_loss(tape, params, hyper, batch):
    th = params["x"]
    one = tape.constant(1.0)
    d = tp.sub(th, one)
    return tp.add(tp.mul(d, d), tp.scalar_mul(hyper["value"], tp.mul(th, th)))


def _quad_val_loss(tape, params, hyper, batch):
    d = tp.sub(params["x"], tape.constant(0.5))
    return tp.mul(d, d)


def _scalar_setup(theta0, lam0):
    return ParamVector([("x", np.asarray(float(theta0)))]), HyperParams.scalar(lam0)


class TestT1T2:
    @pytest.mark.parametrize("delta", [1e-6, 1e-5, 1e-4])
    @pytest.mark.parametrize("theta0", [0.3, 1.7, -0.8])
    def test_quadratic_matches_closed_form(self, delta, theta0):
        # d2l_T/dtheta dlam = 2*theta, v = 2*theta - 1, direct = 0:
        # expected result is -(2*theta - 1) * 2*theta * inner_lr
        theta, hyper = _scalar_setup(theta0, 0.7)
        for inner_lr in (1.0, 0.3):
            g = t1t2_hypergrad(theta, hyper, None, None, _quad_train_loss, _quad_val_loss,
                               T1T2Config(fd_delta=delta, inner_lr=inner_lr))
            expected = -(2 * theta0 - 1.0) * 2.0 * theta0 * inner_lr
            assert g[0] == pytest.approx(expected, rel=1e-6)

    def test_hyper_absent_gives_zero(self):
        def train_loss(tape, params, hyper, batch):
            d = tp.sub(params["x"], tape.constant(1.0))
            return tp.mul(d, d)

        theta, hyper = _scalar_setup(0.4, 0.7)
        g = t1t2_hypergrad(theta, hyper, None, None, train_loss, _quad_val_loss)
        assert g[0] == 0.0

    def test_flat_validation_loss_gives_zero_vector(self):
        def val_loss(tape, params, hyper, batch):
            return tp.mse(tape.constant(0.0))

        theta, hyper = _scalar_setup(0.4, 0.7)
        g = t1t2_hypergrad(theta, hyper, None, None, _quad_train_loss, val_loss)
        np.testing.assert_array_equal(g, np.zeros(1))

    @pytest.mark.parametrize("lam", [0.2, 0.5, 1.0, 1.5, 2.0])
    def test_newton_scaled_matches_oracle_at_inner_optimum(self, lam):
        # at theta = 1/(1+lam) the one-step estimate with the exact-Newton
        # inner scale 1/(2+2*lam) reproduces the implicit-function oracle
        theta_star = 1.0 / (1.0 + lam)
        theta, hyper = _scalar_setup(theta_star, lam)
        g = t1t2_hypergrad(theta, hyper, None, None, _quad_train_loss, _quad_val_loss,
                           T1T2Config(inner_lr=1.0 / (2.0 + 2.0 * lam)))
        assert g[0] == pytest.approx(oracle_hypergrad_1d(lam), abs=1e-4)

    def test_nonzero_direct_term(self):
        def val_loss(tape, params, hyper, batch):
            d = tp.sub(params["x"], tape.constant(0.5))
            return tp.add(tp.mul(d, d), tp.mse(hyper["value"], tape.constant(0.25)))

        theta0, lam0 = 0.3, 0.75
        theta, hyper = _scalar_setup(theta0, lam0)
        g = t1t2_hypergrad(theta, hyper, None, None, _quad_train_loss, val_loss)
        expected = 2.0 * (lam0 - 0.25) - (2 * theta0 - 1.0) * 2.0 * theta0
        assert g[0] == pytest.approx(expected, rel=1e-6)

    def test_invalid_delta(self):
        with pytest.raises(ValueError, match="fd_delta"):
            T1T2Config(fd_delta=0.0)


# --- gradient extension ---------------------------------------------------------

def _mlp_forward(tape, params, x_var):
    b = tp.matmul(tape.constant(np.ones((x_var.shape[0], 1))), params["b1"])
    h = tp.relu(tp.add(tp.matmul(x_var, params["W1"]), b))
    return tp.matmul(h, params["W2"])


def _rotation_train_loss(tape, params, hyper, batch):
    x, y = batch
    pts = tp.rotate2d(hyper["angle"], tape.constant(x))
    return tp.cross_entropy(_mlp_forward(tape, params, pts), y)


def _rotation_val_loss(tape, params, hyper, batch):
    x, y = batch
    return tp.cross_entropy(_mlp_forward(tape, params, tape.constant(x)), y)


def _rotation_pieces(rng, h=8, n=16):
    theta = ParamVector([
        ("W1", rng.normal(size=(2, h)) / math.sqrt(2)),
        ("b1", rng.normal(size=(1, h)) * 0.1),
        ("W2", rng.normal(size=(h, 4)) / math.sqrt(h)),
    ])
    hyper = HyperParams.scalar(0.2, name="angle")
    batch = (rng.normal(size=(n, 2)), rng.integers(0, 4, n))
    vbatch = (rng.normal(size=(n, 2)), rng.integers(0, 4, n))
    return theta, hyper, batch, vbatch


class TestGradientExtension:
    @pytest.mark.parametrize("seed", range(5))
    def test_recorded_gradients_equal_reverse_sweep(self, seed):
        rng = np.random.default_rng(seed)
        theta, hyper, batch, _ = _rotation_pieces(rng)

        t = tp.Tape()
        pv = {n: t.leaf(v) for n, v in theta.segments}
        hv = {n: t.leaf(v) for n, v in hyper.structure.segments}
        loss = _rotation_train_loss(t, pv, hv, batch)
        wrt = [pv[n] for n in theta.names()] + [hv["angle"]]
        swept = tp.backward(t, loss, wrt)
        recorded = record_gradient_extension(t, loss, wrt)
        for s, r in zip(swept, recorded):
            np.testing.assert_allclose(r.value, s, rtol=1e-12, atol=1e-14)

    def test_extension_grows_the_same_tape(self):
        rng = np.random.default_rng(9)
        theta, hyper, batch, _ = _rotation_pieces(rng)
        t = tp.Tape()
        pv = {n: t.leaf(v) for n, v in theta.segments}
        hv = {n: t.leaf(v) for n, v in hyper.structure.segments}
        loss = _rotation_train_loss(t, pv, hv, batch)
        before, before_bytes = tp.tape_stats(t)
        record_gradient_extension(t, loss, [pv["W1"]])
        after, after_bytes = tp.tape_stats(t)
        assert after > before
        assert after_bytes > before_bytes


def _probe_setup(rng, h=8):
    theta, hyper, batch, vbatch = _rotation_pieces(rng, h=h)

    def batches(r, step):
        return batch, vbatch

    return ProbeSetup(theta=theta, hyper=hyper,
                      train_loss_fn=_rotation_train_loss, val_loss_fn=_rotation_val_loss,
                      batches=batches, theta_lr=0.05, hyper_lr=0.01,
                      perturb=PerturbationConfig(sigma=0.001, tau=0.05, k=2))


class TestCostProbe:
    def test_evograd_pass_counts_by_construction(self):
        report = cost_probe("evograd", _probe_setup(np.random.default_rng(0)), steps=2)
        assert report.forward_passes == 2 + 1 + 1    # K candidates + validation + base update
        assert report.backward_passes == 2           # hypergradient + base update

    def test_t1t2_pass_counts_by_construction(self):
        report = cost_probe("t1t2", _probe_setup(np.random.default_rng(0)), steps=2)
        assert report.forward_passes == 4            # val + 2 FD probes + base update
        assert report.backward_passes == 4

    def test_counts_are_seed_independent(self):
        a = cost_probe("evograd", _probe_setup(np.random.default_rng(0)), steps=2, seed=0)
        b = cost_probe("evograd", _probe_setup(np.random.default_rng(0)), steps=2, seed=123)
        assert (a.tape_nodes, a.stored_bytes, a.forward_passes, a.backward_passes) == \
               (b.tape_nodes, b.stored_bytes, b.forward_passes, b.backward_passes)

    def test_evograd_retains_less_than_unrolled_t1t2(self):
        setup = _probe_setup(np.random.default_rng(1), h=16)
        ev = cost_probe("evograd", setup, steps=1)
        tt = cost_probe("t1t2", setup, steps=1)
        assert ev.tape_nodes < tt.tape_nodes
        assert ev.stored_bytes < tt.stored_bytes

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            cost_probe("neumann", _probe_setup(np.random.default_rng(0)), steps=1)

    def test_csv_row_shape(self):
        report = CostReport("evograd", 3, 10, 800, 4, 2, 1.25)
        row = report.csv_row()
        assert list(row) == ["method", "steps", "tape_nodes", "stored_bytes",
                             "forward_passes", "backward_passes", "wall_ms_median"]


class TestMetaTapeVsUnrolled:
    def test_meta_tape_strictly_smaller(self):
        rng = np.random.default_rng(2)
        theta, hyper, batch, vbatch = _rotation_pieces(rng)
        res = hypergrad_details(theta, hyper, batch, vbatch,
                                _rotation_train_loss, _rotation_val_loss,
                                PerturbationConfig(sigma=0.001, tau=0.05, k=2),
                                np.random.default_rng(0))
        meta_nodes, meta_bytes = tp.tape_stats(res.tape)
        unrolled = record_unrolled_t1t2_tape(theta, hyper, batch, vbatch,
                                             _rotation_train_loss, _rotation_val_loss)
        unr_nodes, unr_bytes = tp.tape_stats(unrolled)
        assert meta_nodes < unr_nodes
        assert meta_bytes < unr_bytes
