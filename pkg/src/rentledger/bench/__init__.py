"""Concurrent load harness and Table-style aggregation for the gateways."""
