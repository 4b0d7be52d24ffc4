"""Neural point cloud renderer.

Point-guided ray sampling, multi-scale sparse feature fields, differentiable
volume rendering, and a convolutional fusion decoder, built on a small
float64 reverse-mode autodiff core.
"""

__version__ = "0.1.0"
