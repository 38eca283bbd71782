"""rankpress: post-training low-rank compression of small dense networks.

Pipeline: estimate per-layer input covariance and output-side KL curvature on
calibration data, factor each weight in the doubly whitened basis, allocate
ranks greedily under a global parameter budget, and optionally remap low-rank
factor rows to int8 under a byte budget.
"""

from .backend import KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
