"""Trend-filtered Gaussian mixtures for time-indexed cytometry data."""
