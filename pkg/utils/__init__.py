"""Activation-compression simulator for tensor- and pipeline-parallel transformers."""

__version__ = "0.1.0"
