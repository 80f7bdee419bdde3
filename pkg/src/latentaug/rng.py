"""Named, splittable random streams.

Every stochastic site in the library (weight init, dropout masks, subset
draws, data generation, shuffling) pulls from its own counter-based stream,
keyed by the experiment seed plus a path of site labels.  Streams are
independent of call order, so adding or removing one consumer never perturbs
another — which is what makes run reports byte-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest_key(parts: tuple) -> int:
    """Map a label path to a 128-bit Philox key via SHA-256."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(8, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8") + b"\x00")
        else:
            raise TypeError(f"stream labels must be int or str, got {type(part)!r}")
    return int.from_bytes(h.digest()[:16], "little")


class StreamHub:
    """Derives independent ``numpy.random.Generator`` streams from a seed.

    ``hub.stream("dropout", step)`` always yields the same stream for the
    same seed and labels; ``hub.child("train")`` scopes a sub-hub so call
    sites don't need to thread full label paths around.
    """

    __slots__ = ("_key",)

    def __init__(self, *key_parts: int | str):
        if not key_parts:
            raise ValueError("a stream hub needs at least a seed as its key")
        self._key = tuple(key_parts)

    def child(self, *parts: int | str) -> "StreamHub":
        return StreamHub(*(self._key + parts))

    def stream(self, *parts: int | str) -> np.random.Generator:
        key = _digest_key(self._key + parts)
        return np.random.Generator(np.random.Philox(key=key))

    @property
    def key_path(self) -> tuple:
        return self._key

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"StreamHub{self._key!r}"
