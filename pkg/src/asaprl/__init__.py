"""Parameterized motion skills, skill recovery and skill-space RL in a 2D traffic simulator."""

__version__ = "0.1.0"
