"""Sparse mixture-of-experts routing policies for TSP/CVRP.

A self-contained numpy stack: a small reverse-mode tensor engine, instance
generators for seven spatial distributions, TSPLIB/CVRPLIB ingestion, the
routing MDP, a gated-expert policy network, reference solvers, and a REINFORCE
training loop with adaptive distribution scheduling.
"""

__version__ = "0.1.0"
