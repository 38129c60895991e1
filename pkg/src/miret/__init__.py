"""Desk-scale multi-interest transformer retrieval.

Layers, bottom to top: an autograd tensor core (``tensor``), attribute
embeddings (``embedding``), transformer blocks (``transformer``), history
compression (``compression``), the assembled model (``model``), the
training objective (``loss``), exact retrieval and evaluation
(``retrieval``), the synthetic world (``data``), and the operator CLI
(``cli``).
"""

from .compression import CompressionLayout, plan_layout
from .embedding import BucketSpec, InteractionRecord
from .model import InterestSet, ModelConfig, MultiInterestModel
from .tensor import Tensor, check_gradient, no_grad

__all__ = [
    "BucketSpec",
    "CompressionLayout",
    "InteractionRecord",
    "InterestSet",
    "ModelConfig",
    "MultiInterestModel",
    "Tensor",
    "check_gradient",
    "no_grad",
    "plan_layout",
]
