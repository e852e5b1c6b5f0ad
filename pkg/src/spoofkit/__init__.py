"""Audio deepfake detection and explainability toolkit."""

__version__ = "0.1.0"
