"""Probe the latent-space geometry of small generative maps through the
pullback metric of an output distance."""

__version__ = "0.1.0"
