"""Stochastic-optimal-control path integrals.

Train a drift control by minimising a path cost, then reuse it as an
importance sampler for propagators, free energies and correlation functions.
"""

__version__ = "0.1.0"
