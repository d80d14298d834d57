"""Homography registration: algebra, warping and the Light2Reg cascade."""

from cad.registration.homography import (
    Homography,
    compose,
    corner_error,
    identity,
    invert,
    rescale_homography,
    translation,
    warp,
)
from cad.registration.light2reg import (
    HomographyRegressor,
    LevelConfig,
    Light2Reg,
    RegressorConfig,
    masked_mse,
    registration_loss,
    registration_pyramids,
)

__all__ = [
    "Homography",
    "HomographyRegressor",
    "LevelConfig",
    "Light2Reg",
    "RegressorConfig",
    "compose",
    "corner_error",
    "identity",
    "invert",
    "masked_mse",
    "registration_loss",
    "registration_pyramids",
    "rescale_homography",
    "translation",
    "warp",
]
