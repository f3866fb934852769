"""Blockchain-backed registry binding IoT device keys to identity-provider accounts."""

__version__ = "0.1.0"
