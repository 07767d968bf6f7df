"""Desk-scale music generation core: mel compression, a linear-attention
flow-matching denoiser with semantic-alignment training, and a control suite
(variations, repainting, flow editing, low-rank adapters), all reproducible
from a single config and seed.
"""

__version__ = "0.1.0"
