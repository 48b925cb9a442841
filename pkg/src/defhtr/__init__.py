"""Handwritten text recognition with deformable convolutions on a small numpy autodiff engine."""

__version__ = "0.1.0"
