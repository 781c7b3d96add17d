"""mveq: measure and improve the multiview 3D equivariance of dense features."""

__version__ = "0.1.0"
