"""Deterministic seed derivation: one master seed, named substreams.

Every stochastic component in the repo draws its seed from
``substream(master, name)`` so that e.g. attack randomness can be varied
without disturbing fingerprint training.
"""

import hashlib

# Canonical substream names used across the pipeline.
DATA = "data"
SECRETS = "secrets"
INIT = "init"
ATTACK = "attack"


def substream(master: int, name: str) -> int:
    """Derive a 32-bit seed for a named substream of the master seed."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
