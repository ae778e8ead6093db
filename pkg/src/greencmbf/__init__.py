"""Distributed CVaR-aware coordinated multicell beamforming for renewable-powered base stations."""

__version__ = "0.1.0"
