"""Collaborative utility/privacy sanitization: learn image-to-image filters
that preserve a utility classifier's posteriors while driving a privacy
classifier's posteriors to the dataset prior."""

__version__ = "0.1.0"
