"""patchlm: a desk-scale joint text + time-series transformer stack."""

__version__ = "0.1.0"
