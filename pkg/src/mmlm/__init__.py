"""Multi-modal recurrent language modeling toolkit."""

__version__ = "0.1.0"
