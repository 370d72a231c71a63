"""Deterministic, splittable random number streams.

Every source of randomness in the package flows through :class:`RngStream`,
a value keyed by ``(seed, path)``. Streams with the same key replay the same
sequence; streams with different paths are independent for all practical
purposes. Because a stream is a value (not a mutable cursor), work can be
farmed out per datum or per step without any chance of draw reordering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF


def _label_word(label) -> int:
    """Map a path label (non-negative int or string) to a uint64."""
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"path labels must be non-negative, got {label}")
        return int(label) & _U64
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"path label must be int or str, got {type(label).__name__}")


@dataclass(frozen=True)
class RngStream:
    """Immutable handle for a keyed random stream.

    ``child(*labels)`` derives a sub-stream; ``generator()`` returns a fresh
    numpy Generator positioned at the start of the stream, so two calls on
    the same stream yield identical sequences.
    """

    seed: int
    path: tuple = ()

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(_label_word(x) for x in labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & _U64, spawn_key=self.path)
        return np.random.default_rng(ss)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream or a ready numpy Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if hasattr(rng, "generator"):
        return rng.generator()
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")
