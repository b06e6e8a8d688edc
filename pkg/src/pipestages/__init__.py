"""Stage extraction, unification and analysis for notebook corpora."""

__version__ = "0.1.0"
