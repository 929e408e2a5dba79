"""Logo synthesis with a DCGAN+ generator guided by regional Gram-matrix style loss."""

__version__ = "0.1.0"
