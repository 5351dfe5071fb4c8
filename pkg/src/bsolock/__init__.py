"""Bloch-Siegert phase teleportation and remote frequency locking simulator."""

__version__ = "0.1.0"
