"""Flattened views of model parameters and of meta-learned quantities.

``ParamVector`` carries a model's trainable tensors as named segments with
a canonical flattening order, so populations of perturbed copies can be
built, combined and projected without the model caring. ``HyperParams``
is the meta-learned side: a single value vector plus a tag saying whether
it is a scalar quantity (a rotation angle) or a network's weights.
"""

from __future__ import annotations

import numpy as np


class ParamVector:
    """Named float64 segments with an exact flatten/unflatten round-trip."""

    def __init__(self, segments):
        self.segments = [(name, np.asarray(v, dtype=np.float64)) for name, v in segments]
        self.total_dim = int(np.sum([v.size for _, v in self.segments])) if self.segments else 0

    def names(self):
        return [name for name, _ in self.segments]

    def get(self, name) -> np.ndarray:
        for n, v in self.segments:
            if n == name:
                return v
        raise KeyError(name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: v for name, v in self.segments}

    def flatten(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for _, v in self.segments])

    def unflatten(self, flat) -> "ParamVector":
        """Rebuild a ParamVector with this segment structure from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise ValueError(f"expected flat vector of length {self.total_dim}, got {flat.shape}")
        out, off = [], 0
        for name, v in self.segments:
            out.append((name, flat[off:off + v.size].reshape(v.shape).copy()))
            off += v.size
        return ParamVector(out)

    def map(self, fn) -> "ParamVector":
        """New ParamVector with ``fn`` applied to each segment array."""
        return ParamVector([(name, fn(v)) for name, v in self.segments])

    def zip_map(self, other: "ParamVector", fn) -> "ParamVector":
        return ParamVector([(name, fn(v, other.get(name))) for name, v in self.segments])

    def copy(self) -> "ParamVector":
        return self.map(np.copy)

    def __repr__(self):
        segs = ", ".join(f"{n}{list(v.shape)}" for n, v in self.segments)
        return f"ParamVector({segs}; dim={self.total_dim})"


class HyperParams:
    """Meta-learned values with their own gradient channel.

    The values are held as named segments (a scalar quantity is one
    shape-() segment; an auxiliary network's weights are its layer
    tensors), and ``values`` exposes the canonical flat N-vector view used
    by hypergradients. ``role`` is ``"scalar-meta"`` or ``"network-meta"``.
    """

    def __init__(self, structure: ParamVector, role: str = "scalar-meta"):
        if role not in ("scalar-meta", "network-meta"):
            raise ValueError(f"unknown hyperparameter role {role!r}")
        if structure.total_dim < 1:
            raise ValueError("hyperparameters must have dimension >= 1")
        self.structure = structure
        self.role = role

    @classmethod
    def scalar(cls, value: float, name: str = "value") -> "HyperParams":
        return cls(ParamVector([(name, np.asarray(float(value)))]), role="scalar-meta")

    @classmethod
    def network(cls, structure: ParamVector) -> "HyperParams":
        return cls(structure, role="network-meta")

    @classmethod
    def from_structure(cls, structure: ParamVector, role: str) -> "HyperParams":
        return cls(structure, role)

    @property
    def values(self) -> np.ndarray:
        return self.structure.flatten()

    @property
    def dim(self) -> int:
        return self.structure.total_dim

    def scalar_value(self) -> float:
        if self.dim != 1:
            raise ValueError(f"not a scalar hyperparameter (dim={self.dim})")
        return float(self.structure.segments[0][1])

    def __repr__(self):
        return f"HyperParams({self.structure!r}, role={self.role!r})"
