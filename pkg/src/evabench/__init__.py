"""Random-feature attention, its control-variate view, and EVA estimators."""
from .causal import CausalMasks, causal_eva, causal_masks
from .control import (
    DecomposedTerms,
    Global,
    PerGroup,
    PerToken,
    cv_estimate,
    decompose,
    expected_h_m,
    group_mean_dominance_check,
    optimal_beta_group,
    optimal_beta_per_token,
    weighted_mse,
)
from .eva import (
    GroupSummary,
    LinearLayerNorm,
    eva_shared_coefficient,
    fault_injection,
    group_coefficients,
    group_summaries,
    ideal_eva,
    practical_eva,
    scatterbrain,
)
from .exact import AttentionInstance, attention_weights, random_instance, softmax_attention
from .features import RFConfig, RFSamples, draw_samples, feature_map, log_xi, performer_attention, snis_estimate
from .grad import GradReport, backward_practical_eva, backward_softmax_attention, finite_difference_grad
from .numerics import logsumexp, make_rng, sample_gaussian, stable_softmax
from .partition import PartitionSpec, build_partition
from .report import EstimatorReport

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
