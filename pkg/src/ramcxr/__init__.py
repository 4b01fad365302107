"""Recurrent attention model for chest-radiograph-style binary classification, on a numpy autodiff core."""

__version__ = "0.1.0"
