"""
Splat Avatar - animatable avatars from posed multi-view images, represented
as one surface-aligned Gaussian splat per face of a rigged template mesh.
"""

from .config import __version__
