"""Hyperspherical mixture clustering and distribution-guided weak
supervision on synthetic point-cloud scenes."""

__version__ = "0.1.0"
