"""Cross-ledger trade tracing through exchange services, with a ground-truth simulator."""

__version__ = "0.1.0"
