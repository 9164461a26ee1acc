"""Patch neighbor consistency training at desk scale.

Differentiable sorting networks over patch distance rows, a toy ViT
teacher/student pair with EMA updates, and frozen-feature evaluation
(clustering, overclustering, nearest-neighbor retrieval) on synthetic scenes.
"""

from .autodiff import DomainError, GradTape, ShapeError, Tensor, backward, finite_difference_check, no_grad
from .loss import LossConfig, ReferenceSet, cross_entropy_perm, neco_loss
from .sortnet import RelaxFamily, RelaxedSortResult, SortingNetwork, build_network, hard_sort_oracle, relax_fn, soft_sort

__all__ = [
    "DomainError",
    "GradTape",
    "LossConfig",
    "ReferenceSet",
    "RelaxFamily",
    "RelaxedSortResult",
    "ShapeError",
    "SortingNetwork",
    "Tensor",
    "backward",
    "build_network",
    "cross_entropy_perm",
    "finite_difference_check",
    "hard_sort_oracle",
    "neco_loss",
    "no_grad",
    "relax_fn",
    "soft_sort",
]

__version__ = "0.1.0"
