"""Plug-and-play multi-trajectory MPC for swarms with distance-limited communication."""

__version__ = "0.1.0"
