"""Reproducible random streams keyed by (seed, replication, purpose)."""

import hashlib
from dataclasses import dataclass
from typing import Tuple

import numpy as np


def purpose_code(purpose: str) -> int:
    """Stable 32-bit integer for a purpose tag."""
    return int(hashlib.md5(purpose.encode("utf-8")).hexdigest()[:8], 16)


@dataclass(frozen=True)
class RngStream:
    """A named, independent random stream.

    The same (seed, key) always reproduces the same sequence; distinct keys
    give independent sequences via numpy's SeedSequence spawn keys.
    """

    seed: int
    key: Tuple[int, ...] = ()

    @classmethod
    def for_replication(cls, seed: int, replication: int, purpose: str = "replication", sub: int = 0):
        return cls(seed=seed, key=(replication, purpose_code(purpose), sub))

    def child(self, purpose: str, sub: int = 0) -> "RngStream":
        return RngStream(seed=self.seed, key=self.key + (purpose_code(purpose), sub))

    @property
    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.PCG64(self.seed_sequence))

    @property
    def stream_id(self) -> str:
        return ".".join(str(k) for k in self.key) or "root"
