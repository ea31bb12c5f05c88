"""Built-in class activation maps by test-time head surgery, with post-hoc baselines and metrics."""

from .model import ModelGraph, PassCounter, backward, forward, tinynet, validate
from .surgery import check_compatibility, explain_builtin, transform

__all__ = [
    "ModelGraph", "PassCounter", "backward", "forward", "tinynet", "validate",
    "check_compatibility", "explain_builtin", "transform",
]
__version__ = "0.1.0"
