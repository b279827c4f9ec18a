"""Benchmark engine for whole-sequence classification and regression on
irregular event sequences."""

__version__ = "0.1.0"
