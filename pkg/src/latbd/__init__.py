"""Birth-and-death interacting particle systems on the lattice.

Exact event-driven simulation on finite windows, monotone couplings on shared
noise, generator/martingale/drift diagnostics, and brute-force verification
oracles at toy scale.
"""

__version__ = "0.1.0"
