"""Population-based hypergradient estimation.

One estimate works as follows: perturb the current model parameters into a
small population of candidates, evaluate each candidate's training loss
(the hyperparameters participate in those losses), turn the losses into
softmax fitness weights, recombine the candidates into a single updated
model by an affine combination under those weights, and backpropagate the
validation loss of the combined model to the hyperparameters. Because the
candidates themselves are detached leaves, no gradient with respect to the
model parameters is ever taken inside the pipeline, so the whole estimate
is first-order: nothing here ever differentiates through a gradient.

Two equivalent computations are provided. ``evograd_hypergrad`` records
the entire pipeline on one tape and runs a single reverse sweep.
``factorized_hypergrad`` computes the same value as an explicit product:
the validation gradient at the combined model is projected through the
perturbation matrix into population space, carried through the softmax
Jacobian, and contracted with per-candidate loss-to-hyperparameter
gradients. The two agree to float precision; the factorized form exposes
the per-candidate pieces, which are independent and may be evaluated in
parallel (results are always reduced in candidate-index order, so the
output does not depend on scheduling).

Loss functions follow one protocol throughout the package::

    loss_fn(tape, params: dict[str, Var], hyper: dict[str, Var], batch) -> scalar Var
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from evograd import tape as tp
from evograd.params import HyperParams, ParamVector


class DisconnectedHypergradError(RuntimeError):
    """The hyperparameters have no path to the validation loss on the tape.

    This signals a mis-wired problem definition: the training loss (or, in
    unusual setups, the validation loss) must consume the hyperparameter
    variables for a hypergradient to exist.
    """


@dataclass
class PerturbationConfig:
    """Noise scale, temperature and population size for one estimate.

    ``sigma`` is the per-coordinate standard deviation of gaussian noise
    (sign noise uses +/- sigma per coordinate with equal probability).
    """

    sigma: float = 0.001
    tau: float = 0.05
    k: int = 2
    noise_kind: str = "sign-gaussian"

    def __post_init__(self):
        problems = []
        if not self.sigma >= 0:
            problems.append(f"sigma must be >= 0, got {self.sigma}")
        if not self.tau > 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if not (isinstance(self.k, (int, np.integer)) and self.k >= 2):
            problems.append(f"k must be an integer >= 2, got {self.k}")
        if self.noise_kind not in ("gaussian", "sign-gaussian"):
            problems.append(f"noise_kind must be gaussian or sign-gaussian, got {self.noise_kind!r}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class Population:
    """A base parameter vector, the drawn perturbations, and the candidates."""

    base: ParamVector
    epsilons: list[ParamVector]
    candidates: list[ParamVector]

    @property
    def k(self) -> int:
        return len(self.candidates)

    def perturbation_matrix(self) -> np.ndarray:
        """Realised perturbations as columns of an (M, K) matrix.

        Columns are ``flatten(candidate) - flatten(base)``, i.e. the
        differences as they exist after rounding, which is what the
        factorized hypergradient must project through for exact agreement
        with the direct path.
        """
        base = self.base.flatten()
        return np.stack([c.flatten() - base for c in self.candidates], axis=1)


@dataclass
class FitnessWeights:
    """Softmax fitness weights and the candidate losses they came from."""

    weights: np.ndarray
    losses: np.ndarray

    @property
    def k(self) -> int:
        return len(self.weights)


def sample_population(theta: ParamVector, cfg: PerturbationConfig, rng: np.random.Generator) -> Population:
    """Draw K perturbed copies of ``theta``.

    Noise is drawn candidate-major, segment-minor, so a fixed generator
    state yields an identical population regardless of how the result is
    consumed.
    """
    epsilons, candidates = [], []
    for _ in range(cfg.k):
        if cfg.noise_kind == "gaussian":
            eps = theta.map(lambda v: rng.normal(0.0, cfg.sigma, v.shape) if cfg.sigma > 0
                            else np.zeros_like(v))
        else:
            eps = theta.map(lambda v: cfg.sigma * np.sign(rng.normal(size=v.shape)))
        epsilons.append(eps)
        candidates.append(theta.zip_map(eps, np.add))
    return Population(base=theta, epsilons=epsilons, candidates=candidates)


def fitness_weights(losses, tau: float) -> FitnessWeights:
    """Softmax of negated, temperature-scaled losses (max-stabilised)."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    losses = np.asarray(losses, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise ValueError(f"non-finite candidate loss at index {bad[0]}: {losses[bad[0]]}")
    s = -losses / tau
    z = s - s.max()
    e = np.exp(z)
    return FitnessWeights(weights=e / e.sum(), losses=losses)


def combine(pop: Population, w: FitnessWeights) -> ParamVector:
    """Affine combination of the candidates under the fitness weights."""
    if w.k != pop.k:
        raise ValueError(f"{w.k} weights for {pop.k} candidates")
    out = []
    for name, base in pop.base.segments:
        acc = np.zeros_like(base)
        for wk, cand in zip(w.weights, pop.candidates):
            acc += wk * cand.get(name)
        out.append((name, acc))
    return ParamVector(out)


def softmax_jacobian(weights: np.ndarray, tau: float) -> np.ndarray:
    """d(weights)/d(losses) for weights = softmax(-losses/tau), a (K, K) matrix.

    Rows sum to zero: the weights live on the simplex.
    """
    w = np.asarray(weights)
    return (np.outer(w, w) - np.diag(w)) / tau


def _stack_scalars(scalars: list[tp.Var]) -> tp.Var:
    """Assemble K scalar Vars into one (K,) Var via basis-vector arithmetic."""
    k = len(scalars)
    t = scalars[0].tape
    basis = np.eye(k)
    acc = tp.scalar_mul(scalars[0], t.constant(basis[0]))
    for i in range(1, k):
        acc = tp.add(acc, tp.scalar_mul(scalars[i], t.constant(basis[i])))
    return acc


def _hyper_leaves(tape: tp.Tape, hyper: HyperParams, requires_grad: bool) -> dict[str, tp.Var]:
    return {name: tape.leaf(v, requires_grad=requires_grad)
            for name, v in hyper.structure.segments}


def _param_leaves(tape: tp.Tape, params: ParamVector, requires_grad: bool) -> dict[str, tp.Var]:
    return {name: tape.leaf(v, requires_grad=requires_grad) for name, v in params.segments}


def _flat_grad(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(g).ravel() for g in grads]) if grads else np.zeros(0)


@dataclass
class HypergradResult:
    grad: np.ndarray                 # dl_V/d(hyper), flat, length N
    candidate_losses: np.ndarray     # (K,)
    weights: np.ndarray              # (K,)
    val_loss: float
    tape: tp.Tape | None             # the recording, when a single tape was used


def hypergrad_details(theta: ParamVector, hyper: HyperParams, train_batch, val_batch,
                      train_loss_fn, val_loss_fn, cfg: PerturbationConfig,
                      rng: np.random.Generator, pop: Population | None = None) -> HypergradResult:
    """Single-tape hypergradient with the intermediate quantities exposed."""
    if pop is None:
        pop = sample_population(theta, cfg, rng)
    t = tp.Tape()
    hyper_vars = _hyper_leaves(t, hyper, requires_grad=True)

    cand_vars = []
    cand_losses = []
    for cand in pop.candidates:            # sequential: one shared tape
        pv = _param_leaves(t, cand, requires_grad=False)
        cand_vars.append(pv)
        cand_losses.append(train_loss_fn(t, pv, hyper_vars, train_batch))
        tp.count_forward()

    loss_vec = _stack_scalars(cand_losses)
    w = tp.softmax(tp.scalar_mul(-1.0 / cfg.tau, loss_vec))

    star = {}
    for name in theta.names():
        star[name] = tp.affine_combine(w, [pv[name] for pv in cand_vars])

    val_loss = val_loss_fn(t, star, hyper_vars, val_batch)
    tp.count_forward()
    if val_loss.shape != ():
        raise ValueError("val_loss_fn must return a scalar Var")

    reachable = t.ancestors(val_loss.idx)
    hyper_list = list(hyper_vars.values())
    if not any(hv.idx in reachable for hv in hyper_list):
        raise DisconnectedHypergradError(
            "hyperparameters have no path to the validation loss; "
            "check that the training loss consumes them")

    grads = tp.backward(t, val_loss, hyper_list)
    return HypergradResult(
        grad=_flat_grad(grads),
        candidate_losses=np.array([c.value for c in cand_losses]),
        weights=w.value.copy(),
        val_loss=float(val_loss.value),
        tape=t,
    )


def evograd_hypergrad(theta: ParamVector, hyper: HyperParams, train_batch, val_batch,
                      train_loss_fn, val_loss_fn, cfg: PerturbationConfig,
                      rng: np.random.Generator, pop: Population | None = None) -> np.ndarray:
    """Hypergradient of the validation loss, flat vector of length N.

    Pipeline: sample population -> candidate training losses -> fitness
    weights -> combined model -> validation loss -> reverse sweep to the
    hyperparameters. No gradient with respect to the model parameters is
    taken anywhere.
    """
    return hypergrad_details(theta, hyper, train_batch, val_batch,
                             train_loss_fn, val_loss_fn, cfg, rng, pop).grad


def _candidate_loss_and_grad(cand: ParamVector, hyper: HyperParams, train_loss_fn,
                             train_batch, hyper_names):
    t = tp.Tape()
    hyper_vars = _hyper_leaves(t, hyper, requires_grad=True)
    pv = _param_leaves(t, cand, requires_grad=False)
    loss = train_loss_fn(t, pv, hyper_vars, train_batch)
    tp.count_forward()
    grads = tp.backward(t, loss, [hyper_vars[n] for n in hyper_names])
    return float(loss.value), _flat_grad(grads)


def factorized_hypergrad(theta: ParamVector, hyper: HyperParams, train_batch, val_batch,
                         train_loss_fn, val_loss_fn, cfg: PerturbationConfig,
                         rng: np.random.Generator, pop: Population | None = None,
                         max_workers: int | None = None) -> np.ndarray:
    """The same hypergradient as an explicit factorization.

    Computes ``direct + (g_v^T E) @ J @ dL`` where ``g_v`` is the
    validation gradient at the combined model taken as a leaf, ``E`` the
    (M, K) realised-perturbation matrix, ``J`` the (K, K) softmax
    Jacobian, and ``dL`` the (K, N) per-candidate loss-to-hyperparameter
    gradients. The K candidate pieces are independent; pass
    ``max_workers`` to evaluate them in a thread pool. Results are reduced
    in candidate-index order either way.
    """
    if pop is None:
        pop = sample_population(theta, cfg, rng)
    hyper_names = [name for name, _ in hyper.structure.segments]

    if max_workers:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            rows = list(ex.map(lambda c: _candidate_loss_and_grad(
                c, hyper, train_loss_fn, train_batch, hyper_names), pop.candidates))
    else:
        rows = [_candidate_loss_and_grad(c, hyper, train_loss_fn, train_batch, hyper_names)
                for c in pop.candidates]
    losses = np.array([r[0] for r in rows])
    dl_dhyper = np.stack([r[1] for r in rows])            # (K, N)

    fw = fitness_weights(losses, cfg.tau)
    jac = softmax_jacobian(fw.weights, cfg.tau)           # (K, K)
    star = combine(pop, fw)

    t = tp.Tape()
    hyper_vars = _hyper_leaves(t, hyper, requires_grad=True)
    star_vars = _param_leaves(t, star, requires_grad=True)
    val_loss = val_loss_fn(t, star_vars, hyper_vars, val_batch)
    tp.count_forward()
    wrt = [star_vars[n] for n in star.names()] + [hyper_vars[n] for n in hyper_names]
    grads = tp.backward(t, val_loss, wrt)
    g_v = _flat_grad(grads[:len(star.names())])           # (M,)
    direct = _flat_grad(grads[len(star.names()):])        # (N,)

    projected = g_v @ pop.perturbation_matrix()           # (K,)
    return direct + projected @ jac @ dl_dhyper


@dataclass
class MetaStepConfig:
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    theta_first: bool = True            # update the model, then the hyperparameters
    use_factorized: bool = False
    hyper_update_enabled: bool = True


@dataclass
class MetaState:
    theta: ParamVector
    hyper: HyperParams
    opt_theta: object
    opt_hyper: object
    step: int = 0


@dataclass
class StepInfo:
    loss_train: float
    loss_val: float | None
    hypergrad_norm: float | None
    tape_nodes: int
    stored_bytes: int
    forward_passes: int
    backward_passes: int


def _theta_update(state: MetaState, train_batch, train_loss_fn) -> float:
    """One ordinary first-order step on the model parameters (fresh tape)."""
    t = tp.Tape()
    pv = _param_leaves(t, state.theta, requires_grad=True)
    hv = _hyper_leaves(t, state.hyper, requires_grad=False)
    loss = train_loss_fn(t, pv, hv, train_batch)
    tp.count_forward()
    names = state.theta.names()
    grads = tp.backward(t, loss, [pv[n] for n in names])
    gpv = ParamVector(list(zip(names, grads)))
    state.theta = state.opt_theta.step(state.theta, gpv)
    return float(loss.value)


def _hyper_update(state: MetaState, train_batch, val_batch, train_loss_fn, val_loss_fn,
                  cfg: MetaStepConfig, rng) -> tuple[float, np.ndarray, tp.Tape | None]:
    if cfg.use_factorized:
        grad = factorized_hypergrad(state.theta, state.hyper, train_batch, val_batch,
                                    train_loss_fn, val_loss_fn, cfg.perturb, rng)
        val = None
        meta_tape = None
    else:
        res = hypergrad_details(state.theta, state.hyper, train_batch, val_batch,
                                train_loss_fn, val_loss_fn, cfg.perturb, rng)
        grad, val, meta_tape = res.grad, res.val_loss, res.tape
    structure = state.hyper.structure
    gpv = structure.unflatten(grad)
    new_struct = state.opt_hyper.step(structure, gpv)
    state.hyper = HyperParams.from_structure(new_struct, state.hyper.role)
    return val, grad, meta_tape


def meta_step(state: MetaState, train_batch, val_batch, train_loss_fn, val_loss_fn,
              cfg: MetaStepConfig, rng: np.random.Generator) -> StepInfo:
    """One alternating update: exact gradient on the model, estimated
    hypergradient on the hyperparameters. Mutates ``state`` and reports
    per-step instrumentation."""
    with tp.measure_passes() as meter:
        val = grad = meta_tape = None
        if cfg.theta_first:
            loss_train = _theta_update(state, train_batch, train_loss_fn)
            if cfg.hyper_update_enabled:
                val, grad, meta_tape = _hyper_update(state, train_batch, val_batch,
                                                     train_loss_fn, val_loss_fn, cfg, rng)
        else:
            if cfg.hyper_update_enabled:
                val, grad, meta_tape = _hyper_update(state, train_batch, val_batch,
                                                     train_loss_fn, val_loss_fn, cfg, rng)
            loss_train = _theta_update(state, train_batch, train_loss_fn)
    state.step += 1
    nodes, stored = (0, 0) if meta_tape is None else tp.tape_stats(meta_tape)
    return StepInfo(
        loss_train=loss_train,
        loss_val=val,
        hypergrad_norm=None if grad is None else float(np.linalg.norm(grad)),
        tape_nodes=nodes,
        stored_bytes=stored,
        forward_passes=meter.forward_passes,
        backward_passes=meter.backward_passes,
    )
