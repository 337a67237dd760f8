"""Desk-scale workbench for multi-position masked-prediction pre-training
and layer-weight probing of a toy transformer encoder."""

__version__ = "0.1.0"
