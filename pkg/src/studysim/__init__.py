"""Outcome-based question utility estimation with simulated learners and exams."""

__version__ = "0.1.0"
