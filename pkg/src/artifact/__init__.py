"""Causal forests, doubly-robust effects and policy trees for coupon campaigns."""

__version__ = "0.1.0"
