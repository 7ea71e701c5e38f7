"""Safe reward-free exploration and constrained planning on tabular MDPs."""

__version__ = "0.1.0"
