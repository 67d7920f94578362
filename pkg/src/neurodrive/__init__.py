"""Synthetic EEG keyword decoding driving a keyword-to-motion tracking controller."""

__version__ = "0.1.0"
