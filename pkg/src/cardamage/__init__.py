"""Car damage classification and localization with a from-scratch numpy CNN."""

__version__ = "0.1.0"
