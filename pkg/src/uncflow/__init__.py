"""Joint optical flow and uncertainty estimation at desk scale."""

__version__ = "0.1.0"
