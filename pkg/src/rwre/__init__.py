"""Random walks in random environments near the simple symmetric walk."""

__version__ = "0.1.0"
