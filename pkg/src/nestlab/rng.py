"""Counter-based random numbers keyed by integer tuples.

Each output is a pure function of its key ``(seed, *fields)``: the key is
folded through the splitmix64 finalizer, so any element can be regenerated in
isolation and batches need no sequential state. Integer streams are identical
on every platform; the float transforms use libm ``log``/``cos`` and are
bit-stable on a given platform.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_keys(seed: int, *fields) -> np.ndarray:
    """Hash each broadcast key tuple ``(seed, *fields)`` to a uint64.

    Fields are folded left to right; leading scalar fields are folded once.
    """
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64) + _GOLDEN)
        for f in fields:
            f = np.asarray(f, dtype=np.int64).astype(np.uint64)
            h = _mix(h + f * _GOLDEN + np.uint64(1))
    return h


def _unit(h: np.ndarray) -> np.ndarray:
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def uniform(seed: int, *fields) -> np.ndarray:
    """Uniform floats in [0, 1) with 53 random bits each."""
    return _unit(hash_keys(seed, *fields))


def normal(seed: int, *fields) -> np.ndarray:
    """Standard normals by Box-Muller; the second uniform comes from re-mixing the key hash."""
    h = hash_keys(seed, *fields)
    with np.errstate(over="ignore"):
        h2 = _mix(h ^ _M2)
    u1 = 1.0 - _unit(h)
    u2 = _unit(h2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
