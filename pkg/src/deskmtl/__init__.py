"""Desk-scale multi-task pre-finetuning with a from-scratch autodiff core."""

__version__ = "0.1.0"
