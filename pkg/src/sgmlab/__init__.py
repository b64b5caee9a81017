"""Score-based diffusion sampling on empirical measures, with OT and dimension tools."""

__version__ = "0.1.0"
