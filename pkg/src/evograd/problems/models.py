"""Small tape-level models shared by the experiment definitions.

Linear layers broadcast their bias row explicitly (a ones-column matmul),
since the engine has no implicit broadcasting. Evaluation-time forwards
are plain numpy: no gradients are needed there and the tape would only
add bookkeeping.
"""

from __future__ import annotations

import math

import numpy as np

from evograd import tape as tp
from evograd.params import ParamVector


def init_mlp(rng: np.random.Generator, dims: list[int]) -> ParamVector:
    """He-style gaussian weights, zero bias rows; segments W0, b0, W1, b1, ..."""
    segments = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        segments.append((f"W{i}", rng.normal(size=(fan_in, fan_out)) / math.sqrt(fan_in)))
        segments.append((f"b{i}", np.zeros((1, fan_out))))
    return ParamVector(segments)


def n_layers(params: dict) -> int:
    return len([k for k in params if k.startswith("W")])


def linear(tape: tp.Tape, x: tp.Var, w: tp.Var, b: tp.Var) -> tp.Var:
    ones = tape.constant(np.ones((x.shape[0], 1)))
    return tp.add(tp.matmul(x, w), tp.matmul(ones, b))


def mlp_logits(tape: tp.Tape, params: dict, x: tp.Var) -> tp.Var:
    h = x
    last = n_layers(params) - 1
    for i in range(last + 1):
        h = linear(tape, h, params[f"W{i}"], params[f"b{i}"])
        if i < last:
            h = tp.relu(h)
    return h


def mlp_logits_np(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Evaluation forward in plain numpy (no tape)."""
    h = x
    last = len([n for n in params.names() if n.startswith("W")]) - 1
    for i in range(last + 1):
        h = h @ params.get(f"W{i}") + params.get(f"b{i}")
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def accuracy(params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    return float((mlp_logits_np(params, x).argmax(axis=1) == y).mean())


def init_weightnet(rng: np.random.Generator, hidden: int,
                   input_scale: float = 0.1) -> ParamVector:
    """Scalar loss in -> rectified hidden layer -> sigmoid scalar weight out.

    The input layer starts small so that typical loss magnitudes land in
    the sigmoid's responsive range; a unit-scale start saturates the
    output for high-loss instances and the meta signal cannot recover it.
    """
    return ParamVector([
        ("V0", rng.normal(size=(1, hidden)) * input_scale),
        ("c0", np.zeros((1, hidden))),
        ("V1", rng.normal(size=(hidden, 1)) / math.sqrt(hidden)),
        ("c1", np.zeros((1, 1))),
    ])


def weightnet_weights(tape: tp.Tape, hyper: dict, losses: tp.Var) -> tp.Var:
    """Per-instance weights in (0, 1) from a (B,) vector of losses."""
    b = losses.shape[0]
    col = tp.reshape(losses, (b, 1))
    h = tp.relu(linear(tape, col, hyper["V0"], hyper["c0"]))
    out = tp.sigmoid(linear(tape, h, hyper["V1"], hyper["c1"]))
    return tp.reshape(out, (b,))


def weightnet_weights_np(structure: ParamVector, losses: np.ndarray) -> np.ndarray:
    col = losses.reshape(-1, 1)
    h = np.maximum(col @ structure.get("V0") + structure.get("c0"), 0.0)
    from scipy.special import expit
    return expit(h @ structure.get("V1") + structure.get("c1")).reshape(-1)


def cross_entropy_np(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-instance cross-entropy in plain numpy (evaluation only)."""
    logits = mlp_logits_np(params, x)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]
