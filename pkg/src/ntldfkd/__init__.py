"""2D laboratory for non-transferable teachers, data-free distillation with
generator-based exploration, and adversarial-probing trap escaping."""

__version__ = "0.1.0"
