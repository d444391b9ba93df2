"""Deterministic random numbers.

All randomness in the project flows from one root seed through PCG64
(numpy's 64-bit permuted congruential generator).  Component streams are
derived by hashing the root seed together with a string label, so adding a
new consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


def seeded_rng(seed: int) -> np.random.Generator:
    """A PCG64 generator; identical seeds give bit-identical sequences."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(root_seed: int, *labels: str | int) -> int:
    """Stable 63-bit sub-seed for a named component stream."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode("utf-8"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") >> 1


def component_rng(root_seed: int, *labels: str | int) -> np.random.Generator:
    return seeded_rng(derive_seed(root_seed, *labels))


def gaussian_init(rng: np.random.Generator, shape, std: float,
                  requires_grad: bool = True, name: str | None = None) -> Tensor:
    """N(0, std^2) tensor; std=0 gives exact zeros."""
    shape = tuple(int(s) for s in shape)
    if std == 0.0:
        data = np.zeros(shape)
    else:
        data = rng.normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=requires_grad, name=name)
