"""Monte Carlo propagation and attribution of aleatoric uncertainty through two-stage model pipelines."""

from uncprop.distributions import (
    CategoricalDist,
    DiagGaussianImage,
    DiscreteImageDist,
    ScalarGaussian,
    SeedSpec,
    gaussian_nll,
    image_nll,
    sample_image,
)
from uncprop.propagation import (
    ClassificationJoint,
    McConfig,
    RegressionJoint,
    marginal_oracle_discrete,
    propagate_classification,
    propagate_regression,
)

__version__ = "0.1.0"

__all__ = [
    "CategoricalDist",
    "ClassificationJoint",
    "DiagGaussianImage",
    "DiscreteImageDist",
    "McConfig",
    "RegressionJoint",
    "ScalarGaussian",
    "SeedSpec",
    "gaussian_nll",
    "image_nll",
    "marginal_oracle_discrete",
    "propagate_classification",
    "propagate_regression",
    "sample_image",
]
