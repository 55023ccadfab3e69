"""Hierarchical transformer with irregular windows.

Learned offsets deform regular attention windows so tokens can be gathered,
attended and agglomerated along object boundaries; a query-based decoder with
Hungarian set matching predicts human-object interaction triplets. Everything
runs on a small float64 autodiff core with finite-difference verification.
"""

from .config import RunConfig
from .core import Tensor
from .model import IwinModel, ModelConfig

__all__ = ["IwinModel", "ModelConfig", "RunConfig", "Tensor"]
__version__ = "0.1.0"
