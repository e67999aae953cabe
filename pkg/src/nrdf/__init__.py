"""Neural Riemannian distance fields on the product manifold of unit quaternions."""

__version__ = "0.1.0"
