"""Counter-based deterministic random draws.

Every stochastic decision in the engine (compliance, message drops, trip
shifts) is a pure function of (seed, labelled key), so replaying a run with
the same inputs reproduces every draw bit-exactly, independent of call
order, platform, or process.
"""

from __future__ import annotations

from hashlib import blake2b

_SCALE = float(2**64)


def unit_draw(seed: int, *key: object) -> float:
    """Uniform draw in [0, 1) keyed by (seed, *key)."""
    material = repr((int(seed),) + tuple(key)).encode("utf-8")
    digest = blake2b(material, digest_size=8).digest()
    return int.from_bytes(digest, "big") / _SCALE


def coin(seed: int, probability: float, *key: object) -> bool:
    """True with the given probability, deterministically keyed."""
    if probability <= 0.0:
        return False
    if probability >= 1.0:
        return True
    return unit_draw(seed, *key) < probability
