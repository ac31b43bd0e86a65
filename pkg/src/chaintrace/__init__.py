"""chaintrace: cross-ledger transaction forensics toolkit."""

__version__ = "0.1.0"
