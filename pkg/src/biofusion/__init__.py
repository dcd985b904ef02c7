"""Score-level fusion of multimodal biometric classifiers under cost, quality and missing-data constraints."""

__version__ = "0.1.0"
