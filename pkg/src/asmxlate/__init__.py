"""Assembly/C translation with a small decoder-only transformer and parameter-efficient adaptation."""

__version__ = "0.1.0"
