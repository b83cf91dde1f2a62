"""vesseltrainer: desk-scale two-stage CycleGAN for vesselforge cascades."""

__version__ = "0.1.0"
