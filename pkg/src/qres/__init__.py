"""Maximum-likelihood angular superresolution for antenna arrays.

Subpackages cover the array geometry, amplitude and noise models, the
residual-power (Q) core, Fisher/Cramer-Rao bounds, direction estimators,
the sequential target-count test, and a seeded Monte Carlo harness.
"""

from ._kernels import BACKEND as kernel_backend  # noqa: F401

__version__ = "0.1.0"
