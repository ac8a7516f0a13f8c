"""Rough-path lifts of near-Brownian noise, an RDE solver, 1-d HJB solvers and
Monte-Carlo cost evaluation for checking the robustness of Lipschitz policies."""

__version__ = "0.1.0"
