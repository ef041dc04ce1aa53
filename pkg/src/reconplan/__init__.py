"""Reconstruction planning toolkit.

Bayesian optimization of cut-plane and donor-positioning variables against
apposition- and safety-factor-based bone-union objectives, with
template-to-patient registration and parameter personalization, driven by a
deterministic built-in evaluator or an external one over a JSON subprocess
protocol.
"""

from .bone import ContactParams, StimulusParams
from .design import DesignVector, FeasibleRegion
from .evaluator import EvaluationResult, SyntheticEvaluator, SyntheticModelConfig
from .objective import ObjectiveWeights, cycle_average, f_opt, f_sf
from .runio import TOOL_VERSION as __version__

__all__ = [
    "ContactParams",
    "StimulusParams",
    "DesignVector",
    "FeasibleRegion",
    "EvaluationResult",
    "SyntheticEvaluator",
    "SyntheticModelConfig",
    "ObjectiveWeights",
    "cycle_average",
    "f_opt",
    "f_sf",
    "__version__",
]
