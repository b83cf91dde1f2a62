"""vesselforge: two-stage vessel-aware contrast synthesis and evaluation."""

__version__ = "0.1.0"
