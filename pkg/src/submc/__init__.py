"""Instrumented subsampling-MCMC laboratory.

Kernels report per-step datapoint usage; diagnostics turn traces into
spectral gaps, effective sample sizes, covering times and the
accesses-per-effective-sample cost functional; the manifold module builds
coupled datasets that share a prefix and all control-variate values.
"""

__version__ = "0.1.0"

from ._backend import backend, set_backend, using_numba

__all__ = ["backend", "set_backend", "using_numba", "__version__"]
