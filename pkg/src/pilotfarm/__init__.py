"""Pilot-based coordinator/worker task farm with local and simulated backends."""

__version__ = "0.1.0"
