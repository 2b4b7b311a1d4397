"""Evolutionary multitask learning over a store of immutable shared layers."""

__version__ = "0.1.0"
