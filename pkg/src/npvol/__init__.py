"""Gaussian-manifold projections of discrete Volterra processes, and the
geometric deep networks / hypernetworks that learn to predict them."""

__version__ = "0.1.0"
