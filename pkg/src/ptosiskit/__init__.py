"""Eyelid droop measurement (MRD1, iris ratio) and ptosis classification."""

__version__ = "0.1.0"
