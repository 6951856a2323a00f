"""Dual-chain (plot event + character temporal) reasoning for narrative video QA,
with a deterministic offline backend and an evaluation harness."""

__version__ = "0.1.0"
