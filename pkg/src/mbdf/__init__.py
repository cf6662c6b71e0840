"""Multi-branch MMSE decision-feedback detection for MIMO links."""

__version__ = "0.1.0"
