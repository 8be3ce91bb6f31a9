"""Knowledge-boundary probing of black-box language models."""

__version__ = "0.1.0"
