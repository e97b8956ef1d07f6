"""Autodiff core, layers, detector graphs and checkpoints."""
