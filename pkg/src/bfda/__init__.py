"""Background-focused distribution alignment for cross-domain one-stage pedestrian detection."""

__version__ = "0.1.0"
