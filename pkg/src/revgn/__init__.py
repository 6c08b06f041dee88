"""Exact layer-wise Gauss-Newton training for reversible coupling-layer MLPs."""

from .linalg import EXACT, Damp, Noise, Truncate, pseudoinverse, svd
from .revnet import RevMLP, forward, init, inverse, load_checkpoint, save_checkpoint
from .optim import Adam, GaussNewton, GNConfig, SGD, gn_step

__version__ = "0.1.0"

__all__ = [
    "EXACT", "Damp", "Noise", "Truncate", "pseudoinverse", "svd",
    "RevMLP", "forward", "init", "inverse", "load_checkpoint", "save_checkpoint",
    "Adam", "GaussNewton", "GNConfig", "SGD", "gn_step",
    "RevGNClassifier", "RevGNRegressor",
]


def __getattr__(name):
    # estimators pull in scikit-learn; load them on first use
    if name in ("RevGNClassifier", "RevGNRegressor"):
        from . import estimator

        return getattr(estimator, name)
    raise AttributeError(f"module 'revgn' has no attribute {name!r}")
