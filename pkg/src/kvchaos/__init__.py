"""Coalescing Brownian flows and truncated Wiener-chaos expansions.

Subpackages:

- partitions: interval partitions, chains, lambda rules
- semigroup: grid functions, heat/OU/absorbed semigroups, kernel pipelines
- noise: Wiener bundles, iterated Ito integrals, stochastic exponents
- flow: n-point coalescing (Arratia) flow simulation
- kv: truncated chaos expansions and their Monte Carlo verifiers
- harness: configuration-driven experiments and the acceptance suite
"""

__version__ = "0.1.0"

from . import partitions, semigroup, noise, flow, kv, harness  # noqa: F401,E402
