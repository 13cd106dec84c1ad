"""Rental documentation management on a tamper-evident permissioned ledger."""

__version__ = "0.1.0"
