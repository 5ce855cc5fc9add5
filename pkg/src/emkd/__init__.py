"""Knowledge distillation of small segmentation networks: prediction maps,
importance maps and region affinity, on a numpy autodiff engine."""

__version__ = "0.1.0"
