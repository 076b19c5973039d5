"""Two-stage Transformer speech recognizer: audio -> sub-word units -> words."""

__version__ = "0.1.0"
