"""Streaming speech recognition from simulated mmWave radar vibrations."""
__version__ = "0.1.0"
