"""normlab: unified feature normalization with conditional modulation.

A float64 tensor/autodiff core, the four index-set normalization domains
(batch, layer, instance, group) with fixed or conditionally generated
affine parameters, desk-scale visual-reasoning and few-shot models, and
an experiment harness around them.
"""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
