"""Multi-morphology quadruped locomotion learning."""

__version__ = "0.1.0"
