"""Point spatio-temporal convolution for raw point cloud sequences."""

__version__ = "0.1.0"
