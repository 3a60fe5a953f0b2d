"""Income/geography fairness toolkit."""
__version__ = "0.1.0"
