"""Bayesian optimization for conditional (tree-structured) search spaces.

All subspaces of a conditional space are modeled by one surrogate: a
structure-aware token embedding feeds a self-attention encoder whose pooled
output drives a single Matérn-5/2 deep-kernel Gaussian process. Acquisition
is expected improvement maximized per subspace with top-B batching.
"""

__version__ = "0.1.0"

from treebo.spacedsl import (
    Configuration,
    SearchSpace,
    SpaceError,
    deserialize_config,
    load_builtin_space,
    load_space,
    parse_space,
    sample,
    serialize_config,
)

__all__ = [
    "Configuration",
    "SearchSpace",
    "SpaceError",
    "deserialize_config",
    "load_builtin_space",
    "load_space",
    "parse_space",
    "sample",
    "serialize_config",
    "__version__",
]
