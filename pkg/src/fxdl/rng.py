"""Named random streams derived from one root seed.

``streams(0).get("stage1/noise/iter42")`` always yields the same generator
state regardless of what other streams were drawn before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), *_name_words(name)]))


class Streams:
    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def get(self, name: str) -> np.random.Generator:
        return stream(self.root_seed, name)

    def child(self, prefix: str) -> "Streams":
        return _Prefixed(self.root_seed, prefix)


class _Prefixed(Streams):
    def __init__(self, root_seed: int, prefix: str):
        super().__init__(root_seed)
        self.prefix = prefix.rstrip("/")

    def get(self, name: str) -> np.random.Generator:
        return stream(self.root_seed, f"{self.prefix}/{name}")

    def child(self, prefix: str) -> "Streams":
        return _Prefixed(self.root_seed, f"{self.prefix}/{prefix}")


def streams(root_seed: int) -> Streams:
    return Streams(root_seed)
