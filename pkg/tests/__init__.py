"""Tests package for simsmith."""
