"""Static worst-case energy estimation for ARMv6-M (Cortex-M0) binaries."""

__version__ = "0.1.0"
