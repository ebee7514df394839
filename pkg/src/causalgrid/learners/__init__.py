from .ensemble import (
    BOOSTED,
    KINDS,
    LearnerError,
    LearnerSpec,
    Tree,
    TreeEnsemble,
    fit,
    fit_cart,
    predict,
)
from .tune import DEFAULT_GRID, tune

__all__ = [
    "BOOSTED", "KINDS", "DEFAULT_GRID", "LearnerError", "LearnerSpec", "Tree", "TreeEnsemble",
    "fit", "fit_cart", "predict", "tune",
]
