"""Peer-to-peer wireless energy sharing platform.

Simulated IoT devices run a provider/consumer handshake and transfer
energy over a point-to-point link while an edge coordinator registers
offers, issues transaction IDs and reconciles both parties' battery logs.
"""

__version__ = "0.1.0"
