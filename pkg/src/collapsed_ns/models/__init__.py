"""Model zoo: benchmark hierarchical models and their exact references."""

from .base import LOG_2PI, SCHEMA_VERSION, HierarchicalModel, SyntheticDataset, take_params
from .zoo import (MODELS, BrownianMotion, EightSchools, ItemResponse, LinearFunnel,
                  LinearGaussian, LogGaussianCox, Radon, StochasticVolatility,
                  StudentHierarchy, SupernovaCosmology, TanhFunnel, funnel_quadrature,
                  get_model, kalman_marginal, quadrature_marginal)

__all__ = [
    "LOG_2PI", "SCHEMA_VERSION", "HierarchicalModel", "SyntheticDataset", "take_params",
    "MODELS", "get_model", "EightSchools", "Radon", "BrownianMotion", "LogGaussianCox",
    "StochasticVolatility", "ItemResponse", "SupernovaCosmology", "StudentHierarchy",
    "TanhFunnel", "LinearFunnel", "LinearGaussian", "kalman_marginal",
    "quadrature_marginal", "funnel_quadrature",
]
