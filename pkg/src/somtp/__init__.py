"""Selection over multiple temporal poolings (SoM-TP) for time series classification."""
__version__ = "0.1.0"
