"""Desk-scale voice impression control: synthetic backbone, control variants,
leakage metrics and annotation tools."""

__version__ = "0.1.0"
