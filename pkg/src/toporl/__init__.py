"""toporl: desk-scale closed-loop trainer for graph navigation policies."""

__version__ = "0.1.0"
