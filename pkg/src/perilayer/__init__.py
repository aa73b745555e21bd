"""Thin periodic layers of Neumann holes meeting re-entrant corners: asymptotics and checks."""
__version__ = "0.1.0"
