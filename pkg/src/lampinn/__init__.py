"""Compositional meta-learning of physics-informed networks for
parameterized PDE families: task design, learning-affinity clustering,
modular subnetworks with routing weights, and evaluation tooling."""

import jax

# Exact-derivative checks and checkpoints rely on 64-bit arithmetic.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
