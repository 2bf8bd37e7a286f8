"""Hybrid novel view synthesis: a bidirectional transformer over
Plücker-conditioned patch tokens feeding a deterministic RGB+confidence head
and a per-token diffusion head, sampled by confidence-thresholded hybrid
unmasking."""

__version__ = "0.1.0"
