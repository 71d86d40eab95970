"""Rational policy gradient on matrix games."""
