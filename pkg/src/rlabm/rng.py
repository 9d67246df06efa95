"""Named, splittable random streams.

Every stream is addressed by ``(seed, path)`` where ``path`` is the tuple of
labels used to fork it from the root. The generator state is derived from that
address alone, so forking never consumes draws from the parent and adding a new
child (say, one more agent) leaves every other stream untouched.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractViolation

SEED_MASK = (1 << 64) - 1


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A reproducible random stream with a label path.

    ``counter`` counts draw calls made through this wrapper. Code that needs
    bulk vectorised draws can use :attr:`generator` directly; those calls are
    not counted.
    """

    def __init__(self, seed: int, stream_id: str = "root", _path: tuple[str, ...] = ()):
        self.seed = int(seed) & SEED_MASK
        self.stream_id = stream_id
        self._path = _path
        keys = tuple(_label_key(p) for p in _path)
        self._seq = np.random.SeedSequence(entropy=self.seed, spawn_key=keys)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))
        self.counter = 0
        self._children: set[str] = set()

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r}, counter={self.counter})"

    @property
    def path(self) -> tuple[str, ...]:
        return self._path

    def fork(self, label: str) -> "RngStream":
        """Return the child stream named ``label``.

        Each label may be forked once per parent object; a second fork with the
        same label would silently alias the first child's draws.
        """
        if label in self._children:
            raise ContractViolation(f"stream {self.stream_id!r} already forked label {label!r}")
        self._children.add(label)
        child_id = f"{self.stream_id}/{label}"
        return RngStream(self.seed, child_id, self._path + (label,))

    def derive_seed(self, label: str) -> int:
        """A 64-bit integer seed tied to ``label`` (for handing to other components)."""
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_label_key(p) for p in self._path + ("#seed", label))
        )
        return int(seq.generate_state(1, dtype=np.uint64)[0])

    # Counted scalar/array draws -------------------------------------------------

    def random(self, size=None):
        self.counter += 1
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self.generator.integers(low, high, size=size)

    def bernoulli(self, p, size=None):
        self.counter += 1
        return self.generator.random(size) < p

    def permutation(self, n):
        self.counter += 1
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        self.counter += 1
        return self.generator.choice(a, size=size, replace=replace, p=p)


def rng_fork(parent: RngStream, label: str) -> RngStream:
    return parent.fork(label)
