"""Lindblad dynamics of excitonic systems with reference and neural-operator propagators."""

__version__ = "0.1.0"
