"""Deep segmentation ensembles trained from multiple, contradictory annotations."""

__version__ = "0.1.0"
