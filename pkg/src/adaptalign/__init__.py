"""Content-adaptive motion alignment toolkit for learned video coding experiments."""

__version__ = "0.1.0"
