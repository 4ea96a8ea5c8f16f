"""Datasets, k-epsilon measurement and report emission."""
