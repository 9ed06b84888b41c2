"""Personalized multi-task fusion weights via GRPO with Dirichlet exploration."""

__version__ = "0.1.0"
