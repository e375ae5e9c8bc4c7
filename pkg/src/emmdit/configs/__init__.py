"""Bundled model and experiment configuration files."""
