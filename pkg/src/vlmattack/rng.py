"""Counter-based pseudo-randomness shared by every seeded component.

All randomness in this package (reference-encoder weights, zero-order
perturbation samples, Gaussian post-processing noise, manifest pairings)
is drawn from one fully specified generator so that runs are bit-for-bit
reproducible across platforms and independent of evaluation order:

* raw stream: SplitMix64 used in counter mode.  The i-th raw word for a
  64-bit key ``k`` is ``mix64(k + (i + 1) * GOLDEN)`` where ``mix64`` is
  the SplitMix64 finalizer (Steele et al., "Fast splittable pseudorandom
  number generators") and ``GOLDEN = 0x9E3779B97F4A7C15``.
* uniforms: the top 53 bits of a raw word, mapped to (0, 1] via
  ``(word >> 11) + 1) * 2**-53`` (never 0, so logs are safe).
* normals: the Box-Muller transform on consecutive uniform pairs
  (2i, 2i+1); odd tails discard the sine half of the last pair.

Keys for independent streams are derived by folding integer labels into a
seed with ``derive_key``, e.g. ``derive_key(seed, step, sample_index)``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int, reduced mod 2**64."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *labels: int) -> int:
    """Fold integer labels into a seed, one mix round per label.

    Distinct label tuples give statistically independent streams; the
    empty tuple returns a mixed form of the seed itself.
    """
    key = mix64(seed)
    for label in labels:
        key = mix64((key + GOLDEN + mix64(label)) & _MASK64)
    return key


def _raw_words(key: int, count: int, start: int = 0) -> np.ndarray:
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = (np.uint64(key & _MASK64) + counters * np.uint64(GOLDEN)).astype(np.uint64)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


def uniforms(key: int, count: int, start: int = 0) -> np.ndarray:
    """``count`` doubles in (0, 1], from counters start..start+count-1."""
    words = _raw_words(key, count, start)
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)


def normals(key: int, shape: int | tuple[int, ...]) -> np.ndarray:
    """Standard-normal array via Box-Muller on the uniform stream."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    pairs = (n + 1) // 2
    u = uniforms(key, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(shape)
