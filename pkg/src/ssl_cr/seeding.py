"""Named random streams derived from one master seed."""

import logging
import random
import zlib
from typing import Optional

import numpy as np
import torch

logger = logging.getLogger(__name__)

# Streams every run records in its manifest.
STREAM_NAMES = (
    "sampling",
    "aug_weak",
    "aug_strong",
    "aug_pretrain",
    "aug_finetune",
    "init",
    "shuffle",
    "shuffle_unlabeled",
    "labels",
)


class RngStreams:
    """Independent numpy and torch generators keyed by stream name.

    Each name maps to a `SeedSequence` whose spawn key is a stable hash of the
    name, so the same (seed, name) pair always yields the same sequence and
    different names yield unrelated ones.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self._numpy: dict[str, np.random.Generator] = {}

    @staticmethod
    def _name_key(name: str) -> int:
        return zlib.crc32(name.encode("utf-8"))

    def seed_for(self, name: str) -> int:
        """Return the 32-bit seed derived for `name`."""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._name_key(name),))
        return int(sequence.generate_state(1, dtype=np.uint32)[0])

    def numpy(self, name: str) -> np.random.Generator:
        """Return the persistent numpy generator for `name`."""
        if name not in self._numpy:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._name_key(name),))
            self._numpy[name] = np.random.default_rng(sequence)
        return self._numpy[name]

    def torch(self, name: str) -> torch.Generator:
        """Return a fresh torch generator seeded for `name`."""
        return torch.Generator().manual_seed(self.seed_for(name))

    def child(self, name: str, *keys: int) -> np.random.Generator:
        """Return a generator for one item of work, e.g. (epoch, step, index)."""
        return np.random.default_rng([self.seed_for(name), *(int(k) for k in keys)])

    def describe(self, names: Optional[tuple[str, ...]] = None) -> dict[str, int]:
        """Map stream names to derived seeds for the run manifest."""
        return {name: self.seed_for(name) for name in (names or STREAM_NAMES)}


def seed_all(seed: int) -> RngStreams:
    """Seed global generators and return the named streams for a run."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug("[seed] master seed %d", seed)
    return RngStreams(seed)
