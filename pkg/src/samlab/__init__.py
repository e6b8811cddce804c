"""SAM and USAM variants, their continuous-time models, and empirical checks of both."""

__version__ = "0.1.0"
