"""Bayesian taxonomic classification of DNA sequences that can call new taxa.

A Pitman-Yor prior over the taxonomic tree gives every unseen branch a
probability, and Dirichlet-multinomial kernels score sequences against
observed and novel leaves alike.
"""

__version__ = "0.1.0"

from .classifier import (
    Annotation,
    RankCall,
    TrainedModel,
    aggregate,
    classify,
    classify_many,
    log_posteriors,
    temper,
    train,
)
from .errors import DataError, ModelFormatError, NumericError
from .species_prior import LevelParams, fit_all_levels, log_eppf, urn_probabilities
from .taxonomy import TaxonomicTree, build_tree, enumerate_candidates

__all__ = [
    "Annotation", "DataError", "LevelParams", "ModelFormatError", "NumericError", "RankCall",
    "TaxonomicTree", "TrainedModel", "__version__", "aggregate", "build_tree", "classify",
    "classify_many", "enumerate_candidates", "fit_all_levels", "log_eppf", "log_posteriors",
    "temper", "train", "urn_probabilities",
]
