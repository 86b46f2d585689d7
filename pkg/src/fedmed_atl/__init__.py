"""Federated cross-modality MR synthesis on misaligned, unpaired data."""

__version__ = "0.1.0"
