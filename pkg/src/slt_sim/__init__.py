"""Desk-scale simulator for successive layer training under device memory budgets."""

__version__ = "0.1.0"
