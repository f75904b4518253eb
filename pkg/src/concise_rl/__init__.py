"""Two-stage RL for concise reasoning on a desk-scale arithmetic task."""

__version__ = "0.1.0"
