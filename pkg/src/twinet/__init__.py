"""twinet: a desk-scale bidirectional link between a real wireless network and its digital twin."""

__version__ = "0.1.0"
