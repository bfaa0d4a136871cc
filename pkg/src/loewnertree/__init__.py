"""Branching Loewner evolutions.

Samples binary genealogies, evolves driving-measure atoms by Coulombic
repulsion or Dyson Brownian motion, traces the resulting tree-shaped hulls
in the upper half-plane, and runs Monte Carlo checks of the measure-valued
scaling limits.
"""

__version__ = "0.1.0"
