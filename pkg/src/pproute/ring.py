"""Arithmetic in Z_{2^l} and the fixed-point codec.

Ring elements are numpy ``uint64`` arrays (0-d arrays for scalars). For
``l < 64`` every result is reduced with ``cfg.mask``; for ``l == 64`` the
native wrap-around of ``uint64`` already is the reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RangeError

RingElem = np.ndarray


@dataclass(frozen=True)
class FixedPointConfig:
    l: int = 64
    f: int = 16
    n_headroom: int = 8

    def __post_init__(self) -> None:
        if not 1 < self.l <= 64:
            raise ValueError(f"ring width l={self.l} must be in [2, 64]")
        if not 0 < self.f < self.l:
            raise ValueError(f"need 0 < f < l, got f={self.f}, l={self.l}")
        if self.n_headroom < 0:
            raise ValueError("n_headroom must be nonnegative")

    @property
    def modulus(self) -> int:
        return 1 << self.l

    @property
    def mask(self) -> np.uint64:
        return np.uint64(self.modulus - 1)

    @property
    def scale(self) -> int:
        return 1 << self.f

    @property
    def bound(self) -> float:
        """Exclusive magnitude bound of representable reals."""
        return float(2 ** (self.l - 1 - self.f))

    @property
    def elem_bytes(self) -> int:
        return (self.l + 7) // 8

    def to_dict(self) -> dict:
        return {"l": self.l, "f": self.f, "n_headroom": self.n_headroom}


DEFAULT_CONFIG = FixedPointConfig()


def _unwrap(a: np.ndarray):
    return a[()] if a.ndim == 0 else a


def as_ring(x, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    """Coerce Python/numpy integers (possibly negative) to ring elements."""
    a = np.asarray(x)
    if a.dtype == np.uint64:
        return a & cfg.mask
    if a.dtype.kind in "iu":
        return a.astype(np.int64).astype(np.uint64) & cfg.mask
    if a.dtype == object:
        # arbitrary Python ints
        m = cfg.modulus - 1
        return np.vectorize(lambda v: int(v) & m, otypes=[np.uint64])(a)
    raise TypeError(f"cannot interpret dtype {a.dtype} as ring elements")


def add(a: RingElem, b: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    with np.errstate(over="ignore"):
        return np.asarray(np.add(a, b, dtype=np.uint64)) & cfg.mask


def sub(a: RingElem, b: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    with np.errstate(over="ignore"):
        return np.asarray(np.subtract(a, b, dtype=np.uint64)) & cfg.mask


def neg(a: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    with np.errstate(over="ignore"):
        return np.asarray(np.subtract(np.uint64(0), a, dtype=np.uint64)) & cfg.mask


def mul(a: RingElem, b: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    with np.errstate(over="ignore"):
        return np.asarray(np.multiply(a, b, dtype=np.uint64)) & cfg.mask


def to_signed(e: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Two's-complement reading of ring elements as int64."""
    e = np.asarray(e, dtype=np.uint64)
    if cfg.l == 64:
        return e.view(np.int64)
    s = (e & cfg.mask).astype(np.int64)
    half = np.int64(1 << (cfg.l - 1))
    return np.where(s >= half, s - np.int64(cfg.modulus), s)


def from_signed(s: np.ndarray, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    return np.asarray(s, dtype=np.int64).astype(np.uint64) & cfg.mask


def encode(x, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    """round(x * 2^f) mod 2^l, rounding half away from zero."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise RangeError("cannot encode non-finite values")
    if np.any(np.abs(x) >= cfg.bound):
        raise RangeError(f"|x| must be < 2^{cfg.l - 1 - cfg.f} for l={cfg.l}, f={cfg.f}")
    mag = np.abs(x) * cfg.scale  # exact: power-of-two scaling
    scaled = np.floor(mag)
    scaled = scaled + (mag - scaled >= 0.5)
    if np.any(scaled >= float(2 ** (cfg.l - 1))):
        raise RangeError("value rounds outside the signed ring range")
    v = np.copysign(scaled, x).astype(np.int64)
    return from_signed(v, cfg)


def decode(e: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """signed(e) / 2^f; returns a float for 0-d input."""
    return _unwrap(to_signed(e, cfg).astype(np.float64) / cfg.scale)


def decode_int(e: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG):
    """signed(e) with no fixed-point scaling (integer-scaled values such as bits)."""
    return _unwrap(to_signed(e, cfg))


def truncate_share(e: RingElem, bits: int, party: int, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    """Local share truncation by ``bits``.

    Party 0 shifts its signed share right arithmetically; party 1 negates,
    shifts, and negates back. The reconstruction lands on floor or ceil of
    the true quotient (a shared zero stays exactly zero and nonnegative
    values stay nonnegative) unless the shares wrap, which happens with
    probability about |value| / 2^l.
    """
    if bits == 0:
        return np.asarray(e, dtype=np.uint64)
    s = to_signed(e, cfg)
    if party == 0:
        out = s >> bits
    else:
        with np.errstate(over="ignore"):
            out = -((-s) >> bits)
    return from_signed(out, cfg)


def random_ring(rng: np.random.Generator, shape, cfg: FixedPointConfig = DEFAULT_CONFIG) -> RingElem:
    return np.asarray(rng.integers(0, 2**64, size=shape, dtype=np.uint64, endpoint=False)) & cfg.mask


def random_words(rng: np.random.Generator, shape) -> np.ndarray:
    return np.asarray(rng.integers(0, 2**64, size=shape, dtype=np.uint64, endpoint=False))
