"""Multi-view confidence-guided pose and depth refinement on synthetic scenes."""

__version__ = "0.1.0"
