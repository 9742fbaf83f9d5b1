"""flowcast: next-packet prediction, packet-pair validation, and flow classification."""

__version__ = "0.1.0"
