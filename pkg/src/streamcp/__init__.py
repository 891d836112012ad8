"""Robust streaming CP factorization and completion by variational Bayes."""

from .engine import (EngineConfig, SliceResult, StreamingEngine, initialize, prune_ranks,
                     relative_error, residual_error)
from .state import (FactorPosterior, GammaPosterior, HyperPriors, ModelState, SparsePosterior,
                    WindowState)
from .synthetic import (SyntheticSpec, SyntheticStream, generate_drifting_stream,
                        generate_rank_test_stream)
from .tensor import ObservationMask

__version__ = "0.1.0"
