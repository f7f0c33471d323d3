"""Context-aware security and privacy as a service for IoT context streams."""

__version__ = "0.1.0"
