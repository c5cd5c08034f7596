"""Multi-agent traffic simulation and closed-loop policy learning."""

__version__ = "0.1.0"
