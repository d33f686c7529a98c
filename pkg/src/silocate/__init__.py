"""Cross-silo estimation of heterogeneous treatment effects.

Each silo trains a network with a shared branch (covariates common to all
silos) and a silo-specific branch; only the shared branch is averaged at the
server, with a proximal pull keeping local copies near the average.
"""

__version__ = "0.1.0"
