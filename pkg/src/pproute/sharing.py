"""Two-party additive secret sharing over Z_{2^l}.

A ``FixedShare`` is one party's share of an array of secrets (a scalar is a
0-d array, so the same type doubles as a share vector). Everything here is
local: no function in this module communicates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ring
from .errors import ProtocolError
from .ring import DEFAULT_CONFIG, FixedPointConfig, RingElem


@dataclass(frozen=True, eq=False)
class FixedShare:
    party: int
    elem: RingElem
    cfg: FixedPointConfig = DEFAULT_CONFIG

    def __post_init__(self) -> None:
        if self.party not in (0, 1):
            raise ProtocolError(f"party must be 0 or 1, got {self.party}")
        object.__setattr__(self, "elem", np.asarray(self.elem, dtype=np.uint64))

    @property
    def shape(self) -> tuple:
        return self.elem.shape

    @property
    def ndim(self) -> int:
        return self.elem.ndim

    @property
    def size(self) -> int:
        return int(self.elem.size)

    def _like(self, elem: RingElem) -> "FixedShare":
        return FixedShare(self.party, elem, self.cfg)

    def _check(self, other: "FixedShare") -> None:
        if other.party != self.party:
            raise ProtocolError("cannot combine shares held by different parties")
        if other.cfg != self.cfg:
            raise ProtocolError("fixed-point configurations differ")

    def __add__(self, other: "FixedShare") -> "FixedShare":
        self._check(other)
        return self._like(ring.add(self.elem, other.elem, self.cfg))

    def __sub__(self, other: "FixedShare") -> "FixedShare":
        self._check(other)
        return self._like(ring.sub(self.elem, other.elem, self.cfg))

    def __neg__(self) -> "FixedShare":
        return self._like(ring.neg(self.elem, self.cfg))

    def __getitem__(self, idx) -> "FixedShare":
        return self._like(self.elem[idx])

    def reshape(self, *shape) -> "FixedShare":
        return self._like(self.elem.reshape(*shape))

    def sum(self, axis=-1) -> "FixedShare":
        with np.errstate(over="ignore"):
            return self._like(np.asarray(self.elem.sum(axis=axis, dtype=np.uint64)) & self.cfg.mask)

    def broadcast_to(self, shape) -> "FixedShare":
        return self._like(np.broadcast_to(self.elem, shape))

    def __repr__(self) -> str:
        return f"FixedShare(party={self.party}, shape={self.shape})"


ShareVector = FixedShare
Shared = tuple  # (FixedShare for party 0, FixedShare for party 1)


def share(x, rng: np.random.Generator, cfg: FixedPointConfig = DEFAULT_CONFIG) -> tuple[FixedShare, FixedShare]:
    """Split real value(s) ``x`` into two additive shares of encode(x)."""
    enc = ring.encode(x, cfg)
    s0 = ring.random_ring(rng, enc.shape, cfg)
    return FixedShare(0, s0, cfg), FixedShare(1, ring.sub(enc, s0, cfg), cfg)


def share_ring(e: RingElem, rng: np.random.Generator, cfg: FixedPointConfig = DEFAULT_CONFIG) -> tuple[FixedShare, FixedShare]:
    """Share raw ring elements (e.g. integer-scaled bits)."""
    e = ring.as_ring(e, cfg)
    s0 = ring.random_ring(rng, e.shape, cfg)
    return FixedShare(0, s0, cfg), FixedShare(1, ring.sub(e, s0, cfg), cfg)


def trivial(party: int, owner: int, e: RingElem, cfg: FixedPointConfig = DEFAULT_CONFIG) -> FixedShare:
    """This party's share of ring value(s) ``e`` known in the clear to ``owner``.

    The owner's share is ``e`` itself and the other party's share is zero.
    Public constants use ``owner=0``.
    """
    e = ring.as_ring(e, cfg)
    if party == owner:
        return FixedShare(party, e, cfg)
    return FixedShare(party, np.zeros(e.shape, dtype=np.uint64), cfg)


def public(party: int, x, cfg: FixedPointConfig = DEFAULT_CONFIG) -> FixedShare:
    """Share of the public real ``x``; party 0 holds encode(x)."""
    return trivial(party, 0, ring.encode(x, cfg), cfg)


def reconstruct_ring(s0: FixedShare, s1: FixedShare) -> RingElem:
    if {s0.party, s1.party} != {0, 1}:
        raise ProtocolError("reconstruction needs one share from each party")
    if s0.cfg != s1.cfg:
        raise ProtocolError("fixed-point configurations differ")
    return ring.add(s0.elem, s1.elem, s0.cfg)


def reconstruct(s0: FixedShare, s1: FixedShare):
    return ring.decode(reconstruct_ring(s0, s1), s0.cfg)


def reconstruct_int(s0: FixedShare, s1: FixedShare):
    return ring.decode_int(reconstruct_ring(s0, s1), s0.cfg)


def add_public(s: FixedShare, c) -> FixedShare:
    """Add the public real ``c``; only party 0 changes its share."""
    if s.party != 0:
        return s._like(np.broadcast_to(s.elem, np.broadcast_shapes(s.shape, np.shape(c))).copy())
    return s._like(ring.add(s.elem, ring.encode(c, s.cfg), s.cfg))


def add_public_ring(s: FixedShare, e) -> FixedShare:
    """Add public raw ring value(s), e.g. integer offsets."""
    if s.party != 0:
        return s._like(np.broadcast_to(s.elem, np.broadcast_shapes(s.shape, np.shape(e))).copy())
    return s._like(ring.add(s.elem, ring.as_ring(e, s.cfg), s.cfg))


def mul_public_int(s: FixedShare, c) -> FixedShare:
    """Multiply by public integer(s); exact, no truncation."""
    return s._like(ring.mul(s.elem, ring.as_ring(c, s.cfg), s.cfg))


def mul_public(s: FixedShare, c) -> FixedShare:
    """Multiply by public real(s) with one local truncation by f bits."""
    prod = ring.mul(s.elem, ring.encode(c, s.cfg), s.cfg)
    return s._like(ring.truncate_share(prod, s.cfg.f, s.party, s.cfg))


def lin_combine(shares: Sequence[FixedShare], coeffs: Sequence[float]) -> FixedShare:
    """Sum of public-coefficient multiples, truncated once by f bits."""
    if len(shares) != len(coeffs):
        raise ValueError("need one coefficient per share")
    if not shares:
        raise ValueError("empty combination")
    first = shares[0]
    acc = None
    for s, c in zip(shares, coeffs):
        first._check(s)
        term = ring.mul(s.elem, ring.encode(c, s.cfg), s.cfg)
        acc = term if acc is None else ring.add(acc, term, s.cfg)
    return first._like(ring.truncate_share(acc, first.cfg.f, first.party, first.cfg))


def truncate(s: FixedShare, bits: int | None = None) -> FixedShare:
    return s._like(ring.truncate_share(s.elem, s.cfg.f if bits is None else bits, s.party, s.cfg))


def concat(shares: Sequence[FixedShare], axis: int = -1) -> FixedShare:
    first = shares[0]
    for s in shares[1:]:
        first._check(s)
    return first._like(np.concatenate([s.elem for s in shares], axis=axis))


def stack(shares: Sequence[FixedShare], axis: int = 0) -> FixedShare:
    first = shares[0]
    for s in shares[1:]:
        first._check(s)
    return first._like(np.stack([s.elem for s in shares], axis=axis))
