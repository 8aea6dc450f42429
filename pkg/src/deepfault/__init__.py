"""Spectrum-based localization of suspicious neurons in dense classifiers."""

__version__ = "0.1.0"
