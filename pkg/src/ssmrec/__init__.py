"""Selective state-space sequential recommendation with a universal
stochastic gradient method, adaptive batching and odds-ratio preference
fine-tuning."""

__version__ = "0.1.0"
