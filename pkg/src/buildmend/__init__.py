"""Reproduce, diagnose and repair CI compilation failures of embedded C/C++ projects."""

__version__ = "0.1.0"
