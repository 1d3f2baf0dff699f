"""Self-supervised monocular depth estimation with adaptive discrete
disparity volumes: adaptive bin generation, sharpened probability volumes,
soft-argmax depth composition, the full self-supervised loss stack, and a
desk-scale training and evaluation harness on synthetic scenes."""

__version__ = "0.1.0"
