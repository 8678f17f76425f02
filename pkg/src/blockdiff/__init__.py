"""Block diffusion language modelling on a small numpy transformer."""

__version__ = "0.1.0"
