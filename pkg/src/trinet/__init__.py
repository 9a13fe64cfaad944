"""TriNet: triage-note screening models, their evaluation, and an ED workflow simulator."""

__version__ = "0.1.0"
