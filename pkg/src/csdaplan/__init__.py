"""Deterministic coupled photon/electron/positron CSDA-Fokker-Planck transport
with adjoint-based inverse treatment planning."""

__version__ = "0.1.0"
