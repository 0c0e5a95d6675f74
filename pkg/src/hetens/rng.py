"""Deterministic randomness: one top-level seed, named substreams, no global RNG.

Two mechanisms, both pure functions of their keys:

* ``substream(root, *keys)`` builds a ``numpy.random.Generator`` whose stream is
  fully determined by the key tuple (strings are hashed stably, so adding a new
  named stream never perturbs existing ones).
* ``mix64`` / ``fold64`` implement the splitmix64 finalizer on uint64 arrays for
  stateless per-element priorities. Neighbor sampling keys every decision by
  (epoch seed, group, batch size, batch index, hop, relation, node, neighbor),
  which makes it order-independent and safe to run concurrently.
"""

from __future__ import annotations

import zlib

import numpy as np

_U64 = np.uint64
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _key_to_int(key) -> int:
    if isinstance(key, str):
        # crc32 is stable across platforms and python versions, unlike hash()
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    raise TypeError(f"substream keys must be str or int, got {type(key).__name__}")


def substream(root_seed: int, *keys) -> np.random.Generator:
    """Generator for the named substream (root_seed, *keys)."""
    entropy = [_key_to_int(root_seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def mix64(x):
    """splitmix64 finalizer, elementwise on uint64 scalars or arrays."""
    with np.errstate(over="ignore"):  # uint64 wraparound is the algorithm
        z = (np.asarray(x, dtype=_U64) + _U64(0x9E3779B97F4A7C15)) & _MASK
        z = ((z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)) & _MASK
        z = ((z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)) & _MASK
        return z ^ (z >> _U64(31))


def fold64(*keys) -> np.uint64:
    """Fold a key tuple into a single uint64 via iterated mixing."""
    acc = _U64(0x243F6A8885A308D3)
    with np.errstate(over="ignore"):
        for k in keys:
            acc = mix64(acc ^ _U64(_key_to_int(k)))
    return _U64(acc)


def priorities(base: np.uint64, ids: np.ndarray) -> np.ndarray:
    """Stateless uniform uint64 priorities for ``ids`` under stream ``base``."""
    with np.errstate(over="ignore"):
        return mix64(_U64(base) ^ mix64(np.asarray(ids, dtype=_U64)))
