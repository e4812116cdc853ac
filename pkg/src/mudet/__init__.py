"""mudet: multimodal (RGB + height map) oriented vehicle detection kit."""

__version__ = "0.1.0"
