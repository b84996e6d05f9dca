"""Multi-level alignment network for text-based person search at desk scale."""

__version__ = "0.1.0"
