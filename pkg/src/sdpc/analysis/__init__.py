"""Measurement tools for trained networks."""

from .gabor import (
    GaborFit,
    OrientationAtlas,
    atlas_from_orientations,
    build_atlas,
    fit_atoms,
    fit_gabor,
    gabor_kernel,
)
from .interaction import (
    AdjustedActivity,
    InteractionMap,
    activity_ratio,
    adjusted_activity,
    aggregate_maps,
    average_maps,
    axis_profile,
    cocircular_reference,
    cocircularity_deviation,
    colinearity_deviation,
    interaction_map,
    precision_ratio,
    precision_ratios,
    region_mask,
    select_centers,
)
from .metrics import active_fraction, ssim
from .stats import StatSummary, median_mad, wilcoxon

__all__ = [
    "AdjustedActivity",
    "GaborFit",
    "InteractionMap",
    "OrientationAtlas",
    "StatSummary",
    "active_fraction",
    "activity_ratio",
    "adjusted_activity",
    "aggregate_maps",
    "atlas_from_orientations",
    "average_maps",
    "axis_profile",
    "build_atlas",
    "cocircular_reference",
    "cocircularity_deviation",
    "colinearity_deviation",
    "fit_atoms",
    "fit_gabor",
    "gabor_kernel",
    "interaction_map",
    "median_mad",
    "precision_ratio",
    "precision_ratios",
    "region_mask",
    "select_centers",
    "ssim",
    "wilcoxon",
]
