"""Robust CBF safety filtering with a Poisson safety field and online
adaptation of the robustness parameters."""

__version__ = "0.1.0"
