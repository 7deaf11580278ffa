"""Domain-bridged image translation and weighted pseudo-label adaptation."""

__version__ = "0.1.0"

IGNORE_INDEX = 255
