"""Simulation toolkit for cache-based enclave clone detection."""

__version__ = "0.1.0"
