"""RGB-D semantic segmentation via parametric figure-ground proposals,
second-order pooled region descriptors, per-class overlap regression, and
sequential conflict-resolving inference."""

__version__ = "0.1.0"
