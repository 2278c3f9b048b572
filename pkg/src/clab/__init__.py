"""Continual-learning lab: a toy speech recognizer, parameter-efficient
adapters, Fisher-based forgetting analysis and EWC, in pure numpy."""

__version__ = "0.1.0"
