"""Completion of random low-rank matrices from sparse samples.

Rank-1 exact completion, WalkRank local search, regularized alternating
descent, and analytic distortion bounds, plus an experiment harness.
"""
__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, InconsistencyError, NumericalError,
                     RankfillError, UnsupportedInputError)
from .model import (DiscreteAlphabet, FactorAssignment, FactorDistribution, GroundTruthInstance,
                    generate_instance, rmse)
from .graph import ObservationSet, connected_components, giant_component_fixed_point, sample_observations
from .rank1 import complete_rank1, rank1_optimal_distortion
from .walkrank import WalkRankConfig, run_walkrank
from .als import DescentConfig, run_descent
from .bounds import (BoundInputs, discrete_alphabet_bound, lower_bound, simplified_upper_bound,
                     theorem1_bound, tight_upper_bound)
