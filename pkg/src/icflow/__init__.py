"""In-context rectified-flow image editing at desk scale."""

__version__ = "0.1.0"
