"""Unified conformal prediction: conditional-model p-values, methods, oracle and simulation lab."""
from .core import (
    Bag,
    BagScore,
    DataPoint,
    Dataset,
    OrderedScore,
    Permutation,
    SplitScore,
    abs_residual_ls,
    abs_residual_mean,
    apply_perm,
    augment,
    knn_residual,
    lift,
    recency_weighted_ls,
    score_vector,
    swap,
    to_bag,
)
from .engine import ConditionalModel, PValueResult, prediction_set
from .methods import (
    Box,
    Gaussian,
    LikelihoodRatio,
    NexWeights,
    gwcp,
    gwcp_is,
    gwcp_nonsym,
    nexcp,
    rlcp,
    rlcp_resample,
    split_cp,
    standard_cp,
    wcp,
    wcp_unnormalized,
)
from .wdist import NEG_INF, WeightedMeasure

__version__ = "0.1.0"
