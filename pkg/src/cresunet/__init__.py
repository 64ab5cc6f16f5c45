"""Segmentation network for breast-ultrasound lesions, built on a small numpy autodiff core."""

from .model import Model, ModelSpec, build, load, param_count, save

__all__ = ["Model", "ModelSpec", "build", "load", "param_count", "save"]
__version__ = "0.1.0"
