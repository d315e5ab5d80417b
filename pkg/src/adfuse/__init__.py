"""adfuse: desk-scale mask-guided, reference-fused diffusion for ad imagery."""

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor, param  # noqa: F401
