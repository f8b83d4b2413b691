"""Distribution-aware single-stage multi-person 3D pose estimation at desk scale."""

__version__ = "0.1.0"
