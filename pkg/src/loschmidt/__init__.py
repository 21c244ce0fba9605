"""Local-control measurement of complex Loschmidt echoes at desk scale."""

__version__ = "0.1.0"
