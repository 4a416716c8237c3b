"""Marker-based hand-object motion capture: simulation, reconstruction and solving."""

from __future__ import annotations

__version__ = "0.1.0"
