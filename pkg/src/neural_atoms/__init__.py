"""Graph networks with learnable neural atoms.

The package has three parts: a small float64 autodiff engine
(:mod:`neural_atoms.autodiff`), the graph layers built on it (message
passing, multi-head attention, the neural-atom block, a virtual-node
baseline), and a training/evaluation harness with a command-line front end.
An Ewald sum matrix module provides an analytic long-range interaction
reference that is independent of the learned models.
"""

__version__ = "0.1.0"
