"""Decentralized stochastic optimisation simulator."""
