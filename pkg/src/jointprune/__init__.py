"""Joint channel / resolution / depth pruning by Gaussian-smoothing gradient descent."""

from .cost import ConstraintSpec, LatencyTable, fill_missing, flops, latency, penalized_error
from .estimator import (
    EvaluatedSample,
    GaussianPolicy,
    LipschitzTracker,
    Schedule,
    estimate_gradient,
    lipschitz_lower_bound,
    sample_noises,
    schedule_value,
    update_mu,
)
from .net import SharedWeightStore, crop_view, desk_space, downsample, forward, make_dataset
from .optimizer import OptimizerConfig, attach_evaluator, run
from .space import (
    ArchitectureConfig,
    ArchitectureSpace,
    LayerSpec,
    active_layers,
    clamp,
    normalize,
    round_to_config,
)

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "ArchitectureSpace", "ConstraintSpec", "EvaluatedSample", "GaussianPolicy",
    "LatencyTable", "LayerSpec", "LipschitzTracker", "OptimizerConfig", "Schedule", "SharedWeightStore",
    "active_layers", "attach_evaluator", "clamp", "crop_view", "desk_space", "downsample", "estimate_gradient",
    "fill_missing", "flops", "forward", "latency", "lipschitz_lower_bound", "make_dataset", "normalize",
    "penalized_error", "round_to_config", "run", "sample_noises", "schedule_value", "update_mu",
]
