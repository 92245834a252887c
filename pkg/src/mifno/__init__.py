"""Surrogate modeling of 3D elastic wave propagation.

End-to-end pipeline: stochastic geology and source generation, a
finite-difference reference solver, a multiple-input Fourier neural
operator trained to predict surface wavefields, seismological evaluation
metrics, and a binary dataset container with a CLI orchestrating all of
it.
"""

__version__ = "0.1.0"
