"""Passive per-TEID latency estimation on GTP-U traffic, plus the analytics loop around it."""
from upfwatch._accel import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
