"""Evolutionary hypergradient estimation on a minimal reverse-mode tape.

The package is organised as a small numpy library:

* ``evograd.tape`` -- the autodiff engine (operators, reverse sweep,
  graph-size instrumentation).
* ``evograd.estimator`` -- the population-based hypergradient: perturb,
  evaluate, softmax-weight, recombine, backpropagate to the
  hyperparameters only.
* ``evograd.baselines`` -- reference hypergradients: the closed-form
  oracle for the 1-d problem and a one-step baseline built from
  first-order gradients plus central finite differences, with cost
  probes.
* ``evograd.problems`` -- the desk-scale experiment definitions.
* ``evograd.harness`` -- configs, seed streams, CSV metrics and the CLI.
"""

from evograd.params import HyperParams, ParamVector
from evograd.tape import Tape, Var, backward, tape_stats

__all__ = ["HyperParams", "ParamVector", "Tape", "Var", "backward", "tape_stats"]
