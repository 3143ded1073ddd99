"""Updatable Siamese tracker with a two-stage one-shot learner."""

__version__ = "0.1.0"
