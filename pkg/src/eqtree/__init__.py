"""Verify and complete mathematical identities with tree-structured neural networks."""
from .grammar import Equation, Expr, parse

__version__ = "0.1.0"

__all__ = ["Equation", "EquationVerifier", "Expr", "NumberAutoencoder", "parse", "__version__"]


def __getattr__(name):
    # scikit-learn is only imported when the estimators are used
    if name in ("EquationVerifier", "NumberAutoencoder"):
        from . import estimators
        return getattr(estimators, name)
    raise AttributeError(f"module 'eqtree' has no attribute {name!r}")
