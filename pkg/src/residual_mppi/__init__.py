"""MPPI trajectory tracking for a kinematic bicycle with a learned
control-affine residual model, trained by iterative data aggregation."""

__version__ = "0.1.0"
