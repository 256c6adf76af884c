"""Privacy-preserving, non-repudiable logging of personal data usage."""

__version__ = "0.1.0"
