"""Semantic segmentation over an embedding-valued label space.

Pixels are classified by cosine retrieval against sentence-embedding
label vectors, trained with heterogeneous supervision tiers (dense masks,
noisy masks with adaptive rejection, box-level distillation) on a fully
synthetic, seed-deterministic corpus.
"""

from embseg.autodiff import Tensor, backward, check_gradients

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "check_gradients", "__version__"]
