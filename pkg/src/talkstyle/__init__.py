"""Speech-driven 3D face motion with speaker-style adaptation."""

__version__ = "0.1.0"
