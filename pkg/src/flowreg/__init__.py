"""Correspondence-free point cloud registration with a from-scratch autodiff core.

Submodules are imported on demand; this module stays free of numpy so the
CLI can apply thread-count settings before any numerical library loads.
"""
__version__ = "0.1.0"
