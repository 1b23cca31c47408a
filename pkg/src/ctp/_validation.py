"""Argument checks shared by the estimators and the pipeline entry points."""
from __future__ import annotations

import numbers

import numpy as np


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed for an independent stream keyed by ``parts``."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def check_fraction(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_non_negative(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or float(value) < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_graph(g, feature_dim: int | None = None, require_labels: bool = False):
    from .graph import Graph

    if not isinstance(g, Graph):
        raise TypeError(f"expected a Graph, got {type(g).__name__}")
    if g.node_count == 0:
        raise ValueError("graph has no nodes")
    if feature_dim is not None and g.feature_dim != feature_dim:
        raise ValueError(f"graph feature width {g.feature_dim} does not match fitted width {feature_dim}")
    if require_labels and not g.node_labels:
        raise ValueError("graph carries no node labels")
    return g
