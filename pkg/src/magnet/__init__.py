"""Multi-agent motion generation with per-token diffusion noise levels.

Modules: ``geometry`` (rigid transforms, canonical frames), ``body`` (toy
skeleton and capsules), ``dataset`` (synthetic interactions, file format),
``nn`` (layers, optimizer, checkpoints), ``vqvae`` (motion tokenizer),
``dfot`` (diffusion transformer), ``sampler`` (plans, DDIM, guidance),
``metrics`` and ``cli``.
"""
from .errors import MagnetError

__version__ = "0.1.0"

__all__ = ["MagnetError", "__version__"]
