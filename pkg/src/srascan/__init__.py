"""srascan: IPv6 subnet-router anycast scanning toolkit."""

__version__ = "0.1.0"
