"""Robust rigid registration from putative 3D correspondences."""

from .consistency import (CompatibilityMatrix, ConsistencyParams, compatibility_matrix,
                          feature_similarity, feature_similarity_matrix, length_difference,
                          spatial_consistency, spatial_consistency_matrix)
from .embed import (EmbedConfig, EmbeddingNetwork, TrainConfig, TrainResult, backward,
                    classification_loss, forward, load_weights, save_weights,
                    spectral_matching_loss, total_loss, train)
from .errors import (AllHypothesesDegenerate, AllSamplesDegenerate, DegenerateConfiguration,
                     InconsistentColumns, NonFiniteLoss, ParseError, RegistrationError,
                     SumWeightsZero, TooFewCorrespondences, UnsupportedFormat, WeightFileError,
                     ZeroNormFeatureWarning)
from .geom import (Correspondence, Correspondences, RigidTransform, apply_transform, residual,
                   residuals, rotation_error, translation_error, weighted_kabsch)
from .pipeline import (Hypothesis, PipelineConfig, RegistrationReport, final_labels, post_refine,
                       register, seed_hypothesis, select_hypothesis, select_seeds)
from .spectral import EigenResult, leading_eigenvector, traditional_sm

__version__ = "0.1.0"
