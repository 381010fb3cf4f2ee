"""Targeted estimation of direct and indirect standardization parameters for provider profiling."""
__version__ = "0.1.0"
