"""Service placement for mobile edge clouds."""
__version__ = "0.1.0"
