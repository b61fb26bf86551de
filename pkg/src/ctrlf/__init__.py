"""Hybrid convolution/transformer image classifier with cross-attention
between multi-level feature maps, built on a small numpy autodiff core."""

from .tensor import Tensor, no_grad, default_dtype
from .model import CTRLF, CTRLF_B, CTRLF_S, TINY, VariantConfig, build_model, preset
from .costs import CostReport, count_costs, patch_sweep

__all__ = [
    "Tensor", "no_grad", "default_dtype",
    "CTRLF", "CTRLF_S", "CTRLF_B", "TINY", "VariantConfig", "build_model", "preset",
    "CostReport", "count_costs", "patch_sweep",
]

__version__ = "0.1.0"
