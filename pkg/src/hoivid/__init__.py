"""Hand-object interaction video diffusion with 3D point-cloud conditioning."""

__version__ = "0.1.0"
