"""Accelerated randomized coordinate descent by linear coupling."""
