"""artok: a desk-scale text-to-image stack built on a scalar-free numpy core.

The pieces, bottom up:

- ``autodiff``    reverse-mode tensors and the primitive library
- ``nn``          layers, initializers, Adam/SGD
- ``scenes``      procedural 32x32 shape scenes and the corpus format
- ``metrics``     mse / psnr / finite-difference checking
- ``tokenizer``   visual tokenizer with a coarse-to-fine token schedule
- ``renderer``    one-step token renderer distilled against the tokenizer
- ``armodel``     decoder-only autoregressive model over a joint vocab
- ``visrl``       program rewards, GRPO, and the ordering harness
- ``diagnostics`` entropy curves, progressive reconstruction, interpolation
- ``cli``         config-driven batch entry point (``python -m artok``)
"""

from .autodiff import ContractViolation, Tensor
from .config import RunConfig, resolve

__all__ = ["ContractViolation", "RunConfig", "Tensor", "resolve"]

__version__ = "0.1.0"
