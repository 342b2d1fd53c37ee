"""Early-exit branches over precomputed backbone feature maps.

Trains lightweight classification + confidence head pairs on exported feature
maps, calibrates per-class exit thresholds against backbone precision, and
evaluates the resulting accuracy/compute trade-off with exact FLOPs accounting.
"""

__version__ = "0.1.0"

from .tensor_core import Rng, ShapeError, NumericsError

__all__ = ["Rng", "ShapeError", "NumericsError", "__version__"]
