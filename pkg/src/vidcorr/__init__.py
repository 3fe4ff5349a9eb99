"""Self-supervised video correspondence learning with label-propagation inference."""

__version__ = "0.1.0"
