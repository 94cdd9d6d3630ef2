"""Bi-Lipschitz neural networks from input-convex potentials."""
