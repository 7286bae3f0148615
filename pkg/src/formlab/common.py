"""Shared error types and seeding helpers."""

from __future__ import annotations

import hashlib

import numpy as np


class StructuralError(ValueError):
    """A caller violated a structural precondition (shape, range, ordering)."""


def derive_rng(master_seed: int, label: str) -> np.random.Generator:
    """Deterministic per-component generator derived from a master seed.

    Each stochastic subsystem (env, pool, init, actors, ...) gets its own
    label so one subsystem can be re-seeded without perturbing the others.
    """
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def derive_seed(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
