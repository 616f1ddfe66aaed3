"""Overhead-imagery segmentation with multi-level refinement and sensor adaptation."""

__version__ = "0.1.0"
