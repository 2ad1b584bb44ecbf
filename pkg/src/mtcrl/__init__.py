"""Multi-task causal representation learning at desk scale.

Disentangled module banks with a learnable task-to-module routing graph,
decorrelation / graph / gradient-invariance regularizers, synthetic
spurious-correlation testbeds, analytic oracles, and a training harness,
all on a small double-backward autodiff tape.
"""

__version__ = "0.1.0"
