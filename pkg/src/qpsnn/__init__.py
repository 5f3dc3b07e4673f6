"""Quantized and pruned spiking neural networks."""
