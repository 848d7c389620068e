"""Dropout-based drift-diffusion classification."""
