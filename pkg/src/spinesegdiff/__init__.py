"""Diffusion-based semantic segmentation of lumbar spine MRI slices.

Subpackages are imported directly (``spinesegdiff.diffusion``,
``spinesegdiff.training``, ...); the package root stays import-light so
data-only tools avoid pulling in torch.
"""

__version__ = "0.1.0"
