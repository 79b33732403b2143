"""Mixture-of-biometric-experts video person re-identification.

Layered package: ``numerics`` (autodiff engine) and ``feature_store``
(on-disk formats, synthetic data) sit at the bottom; ``moe_core``,
``dual_input``, ``losses``, ``trainer``, and ``evaluator`` build the model;
``cli`` ties everything into a command-line tool.
"""

__version__ = "0.1.0"
