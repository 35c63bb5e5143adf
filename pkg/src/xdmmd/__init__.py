"""Explainable deep two-sample testing on embeddings.

Sample-level explanations come from leave-one-out influence scores on the
DMMD statistic, feature-level explanations from backpropagating the
statistic through a small convolutional encoder.
"""

from xdmmd.dmmd import TestResult, permutation_pvalue, statistic, statistic_gradient_wrt_sample
from xdmmd.embedding import EmbeddingSet
from xdmmd.encoder import EncoderModel, backward_to_layer, build_random, embed_dataset, forward
from xdmmd.influence import ablation_curve, influence_of, influence_scores, summarize

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet",
    "EncoderModel",
    "TestResult",
    "ablation_curve",
    "backward_to_layer",
    "build_random",
    "embed_dataset",
    "forward",
    "influence_of",
    "influence_scores",
    "permutation_pvalue",
    "statistic",
    "statistic_gradient_wrt_sample",
    "summarize",
]
