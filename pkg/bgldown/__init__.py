# bgldown package
"""
Two-stage statistical downscaling: climatology/interpolation trend plus a
Basis Graphical Lasso residual model with pointwise uncertainty.
"""

__version__ = "0.1.0"
