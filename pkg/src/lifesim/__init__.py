"""User simulation grounded in life trajectories, and an evaluation harness for assistants."""

__version__ = "0.1.0"
