"""Pseudo-paired text distillation for unimodal image classifiers."""

__version__ = "0.1.0"
