"""Propensity-weighted shallow linear autoencoders for implicit feedback.

Closed-form EASE fitting, inverse-propensity reweighting of the learned
item-item matrix, and a strong-generalization evaluation harness.
"""

from ipslae.dataset import (
    EvalSplit,
    InteractionMatrix,
    InteractionRecord,
    SyntheticGroundTruth,
    generate_mnar,
    load_interactions,
    preprocess,
    split_strong_generalization,
)
from ipslae.evaluation import (
    EvalReport,
    RankedList,
    ScoreMatrix,
    coverage_at_k,
    evaluate,
    ndcg_at_k,
    popular_subset_metrics,
    popularity_bins,
    recall_at_k,
    score_users,
    top_n,
)
from ipslae.propensity import (
    PropensityVector,
    clip_propensity,
    item_counts,
    marginal_utility_log,
    marginal_utility_powerlaw,
    propensity_logsigmoid,
    propensity_powerlaw,
    weight_curve,
)
from ipslae.solver import (
    GramMatrix,
    SimilarityModel,
    SpectralReport,
    apply_item_weights,
    fit_ease,
    fit_ease_oracle,
    fit_ease_weighted_oracle,
    fit_rank_reduced,
    gram,
    spectral_check,
)

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "EvalSplit",
    "GramMatrix",
    "InteractionMatrix",
    "InteractionRecord",
    "PropensityVector",
    "RankedList",
    "ScoreMatrix",
    "SimilarityModel",
    "SpectralReport",
    "SyntheticGroundTruth",
    "apply_item_weights",
    "clip_propensity",
    "coverage_at_k",
    "evaluate",
    "fit_ease",
    "fit_ease_oracle",
    "fit_ease_weighted_oracle",
    "fit_rank_reduced",
    "generate_mnar",
    "gram",
    "item_counts",
    "load_interactions",
    "marginal_utility_log",
    "marginal_utility_powerlaw",
    "ndcg_at_k",
    "popular_subset_metrics",
    "popularity_bins",
    "preprocess",
    "propensity_logsigmoid",
    "propensity_powerlaw",
    "recall_at_k",
    "score_users",
    "spectral_check",
    "split_strong_generalization",
    "top_n",
    "weight_curve",
]
