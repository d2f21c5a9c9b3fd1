"""Helpers to write, index and display experiment outputs."""
