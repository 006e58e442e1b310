"""Parameter-expanded stochastic-gradient MCMC for small Bayesian neural networks."""
from . import analysis, data, nn, potential, samplers, store, targets, tensor
from .errors import (CorruptionError, DegenerateBasisError, DivergenceError, FormatError,
                     InputError, NumericError, ShapeError, SpecError, VersionError)
from .tensor import RngStream

__version__ = "0.1.0"
