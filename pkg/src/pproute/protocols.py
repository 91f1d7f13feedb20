"""Secure two-party protocols written as party programs.

Every public function here is a generator taking the party context first
and that party's shares; run it with ``Session.run``. All of them work on
arrays of any shape and cost the same number of rounds for any batch size.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import ring
from .engine import FROM_DEALER, TO_DEALER, Msg, Party, exchange, open_shares
from .errors import ProtocolError, RangeError
from .ring import FixedPointConfig
from .sharing import FixedShare, concat

_ONE = np.uint64(1)


# --------------------------------------------------------------------------
# multiplication


def secure_mul_many(ctx: Party, pairs: Sequence[tuple[FixedShare, FixedShare]], *, truncate: bool = True):
    """Beaver-multiply several (x, y) pairs in a single round.

    With ``truncate=False`` the raw ring product is returned, which is what
    multiplying by an integer-scaled value (a secret bit) needs.
    """
    cfg = ctx.cfg
    shapes = [np.broadcast_shapes(x.shape, y.shape) for x, y in pairs]
    sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
    xs = np.concatenate([np.broadcast_to(x.elem, s).reshape(-1) for (x, _), s in zip(pairs, shapes)])
    ys = np.concatenate([np.broadcast_to(y.elem, s).reshape(-1) for (_, y), s in zip(pairs, shapes)])
    with ctx.scope("secure_mul"):
        t = ctx.triples(xs.shape)
        e = ring.sub(xs, t.a.elem, cfg)
        d = ring.sub(ys, t.b.elem, cfg)
        other = yield from exchange(ctx, (e, d), 2 * xs.size * cfg.l)
    e = ring.add(e, other[0], cfg)
    d = ring.add(d, other[1], cfg)
    z = ring.add(t.c.elem, ring.add(ring.mul(e, t.b.elem, cfg), ring.mul(d, t.a.elem, cfg), cfg), cfg)
    if ctx.id == 0:
        z = ring.add(z, ring.mul(e, d, cfg), cfg)
    if truncate:
        z = ring.truncate_share(z, cfg.f, ctx.id, cfg)
    out, start = [], 0
    for s, n in zip(shapes, sizes):
        out.append(FixedShare(ctx.id, z[start : start + n].reshape(s), cfg))
        start += n
    return out


def secure_mul(ctx: Party, x: FixedShare, y: FixedShare, *, truncate: bool = True):
    """Elementwise x*y with one online round."""
    (z,) = yield from secure_mul_many(ctx, [(x, y)], truncate=truncate)
    return z


def mul_bit(ctx: Party, bit: FixedShare, x: FixedShare):
    """bit * x for an integer-scaled secret bit; exact."""
    return (yield from secure_mul(ctx, bit, x, truncate=False))


def secure_dot(ctx: Party, u: FixedShare, v: FixedShare):
    """Inner product over the last axis, truncated once after summation."""
    if u.shape[-1:] != v.shape[-1:]:
        raise ProtocolError(f"length mismatch: {u.shape} vs {v.shape}")
    with ctx.scope("secure_dot"):
        prod = yield from secure_mul(ctx, u, v, truncate=False)
    acc = prod.sum(axis=-1)
    return FixedShare(ctx.id, ring.truncate_share(acc.elem, ctx.cfg.f, ctx.id, ctx.cfg), ctx.cfg)


def secure_matmul(ctx: Party, a: FixedShare, b: FixedShare):
    """(..., s, d) @ (..., d, o) -> (..., s, o) as one batched dot-product round."""
    if a.shape[-1] != b.shape[-2]:
        raise ProtocolError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    bt = FixedShare(b.party, np.swapaxes(b.elem, -1, -2)[..., None, :, :], b.cfg)
    return (yield from secure_dot(ctx, a.reshape(*a.shape[:-1], 1, a.shape[-1]), bt))


# --------------------------------------------------------------------------
# comparison


def _tree_schedule(m: int):
    """Levels of the prefix tree over ``m`` low bits.

    Each entry: (half, position mask, triple bit offset, pairs, gates).
    """
    levels = max(0, math.ceil(math.log2(m))) if m > 1 else 0
    width = 1 << levels
    sched = []
    for t in range(levels):
        half = 1 << t
        step = half << 1
        pos = 0
        for p in range(0, width, step):
            pos |= 1 << p
        blocks = -(-m // half)
        pairs = blocks // 2
        gates = pairs * 2 if t < levels - 1 else pairs
        sched.append((half, np.uint64(pos), np.uint64(half - 1), pairs, gates))
    return width, sched


def cmp_rounds(cfg: FixedPointConfig, backend: str) -> int:
    """Online rounds of one secure comparison batch."""
    if backend == "dealer-oracle":
        return 2
    width, sched = _tree_schedule(cfg.l - 1)
    return 1 + len(sched) + 1


def _band(ctx: Party, pairs_xy, triples, nbits: int):
    """Packed Beaver AND gates; all given gates in one round."""
    masked = []
    for (x, y), (a, b, _c) in zip(pairs_xy, triples):
        masked.append(x ^ a)
        masked.append(y ^ b)
    other = yield from exchange(ctx, tuple(masked), nbits)
    out = []
    for i, ((x, y), (a, b, c)) in enumerate(zip(pairs_xy, triples)):
        d = masked[2 * i] ^ other[2 * i]
        e = masked[2 * i + 1] ^ other[2 * i + 1]
        z = c ^ (d & b) ^ (e & a)
        if ctx.id == 0:
            z = z ^ (d & e)
        out.append(z)
    return out


def _msb_circuit(ctx: Party, z: FixedShare):
    cfg = ctx.cfg
    l, m = cfg.l, cfg.l - 1
    rnd = ctx.cmp_randomness(z.shape)
    masked = z + rnd.r
    c = yield from open_shares(ctx, masked)

    width, sched = _tree_schedule(m)
    low = np.uint64((1 << m) - 1)
    wmask = np.uint64((1 << width) - 1) if width < 64 else np.uint64(2**64 - 1)
    pad = wmask & ~low
    cm = ~c & low
    rb = rnd.r_bits
    g = cm & rb & low
    e = rb & low
    if ctx.id == 0:
        e = e ^ cm ^ pad
    n = int(z.size)
    with ctx.scope("and_tree"):
        for half, pos, off, pairs, gates in sched:
            h = np.uint64(half)
            e_hi = (e >> h) & pos
            g_hi = (g >> h) & pos
            e_lo = e & pos
            g_lo = g & pos
            tg = rnd.and_g
            te = rnd.and_e
            trip_g = ((tg.a >> off) & pos, (tg.b >> off) & pos, (tg.c >> off) & pos)
            trip_e = ((te.a >> off) & pos, (te.b >> off) & pos, (te.c >> off) & pos)
            if gates == 2 * pairs:
                ge, ee = yield from _band(ctx, [(e_hi, g_lo), (e_hi, e_lo)], [trip_g, trip_e], 2 * gates * n)
                e = ee
            else:
                (ge,) = yield from _band(ctx, [(e_hi, g_lo)], [trip_g], 2 * gates * n)
            g = g_hi ^ ge
    lt = g & _ONE
    top = np.uint64(l - 1)
    bit = ((rb >> top) & _ONE) ^ lt
    if ctx.id == 0:
        bit = bit ^ ((c >> top) & _ONE)
    # boolean -> arithmetic: b = b0 + b1 - 2*b0*b1
    with ctx.scope("b2a"):
        x = ctx.private(0, bit)
        y = ctx.private(1, bit)
        prod = yield from secure_mul(ctx, x, y, truncate=False)
    two = ring.mul(prod.elem, np.uint64(2), cfg)
    return FixedShare(ctx.id, ring.sub(ring.add(x.elem, y.elem, cfg), two, cfg), cfg)


def _msb_oracle(ctx: Party, z: FixedShare):
    cfg = ctx.cfg
    yield Msg(ctx.label, z.elem, z.size * cfg.l, to=TO_DEALER, op="msb")
    reply = yield Msg(ctx.label, None, 0, to=FROM_DEALER)
    return FixedShare(ctx.id, reply, cfg)


def msb(ctx: Party, z: FixedShare):
    """Arithmetic share of the most significant bit of z (1 iff z < 0)."""
    if ctx.backend == "dealer-oracle":
        return (yield from _msb_oracle(ctx, z))
    return (yield from _msb_circuit(ctx, z))


def secure_cmp(ctx: Party, x: FixedShare, y: FixedShare):
    """Secret bit 1(x > y); requires |x - y| < 2^(l-2)."""
    shape = np.broadcast_shapes(x.shape, y.shape)
    x = x.broadcast_to(shape)
    y = y.broadcast_to(shape)
    with ctx.scope("secure_cmp"):
        return (yield from msb(ctx, y - x))


def drelu(ctx: Party, x: FixedShare):
    """Secret bit 1(x > 0); zero maps to 0."""
    return (yield from secure_cmp(ctx, x, ctx.zeros(x.shape)))


def relu(ctx: Party, x: FixedShare):
    with ctx.scope("relu"):
        b = yield from drelu(ctx, x)
        return (yield from mul_bit(ctx, b, x))


# --------------------------------------------------------------------------
# reciprocal and 2ReLU softmax


def reciprocal(ctx: Party, x: FixedShare, range_hint: tuple[float, float] = (1.0, 100.0), iterations: int = 12):
    """Newton-Raphson 1/x for x known to lie in ``range_hint``; 2 rounds per iteration.

    An x outside the hint is not detected and gives a wrong result.
    """
    lo, hi = range_hint
    if not 0 < lo <= hi:
        raise ValueError(f"range hint must satisfy 0 < lo <= hi, got {range_hint}")
    with ctx.scope("reciprocal"):
        y = ctx.const(2.0 / (lo + hi)).broadcast_to(x.shape)
        for _ in range(iterations):
            xy = yield from secure_mul(ctx, x, y)
            two_minus = ctx.const(2.0) - xy
            y = yield from secure_mul(ctx, y, two_minus)
    return y


def softmax_bounds(m: int, cfg: FixedPointConfig, bound: float):
    """(eps, jlo, jhi, shift) for a length-``m`` 2ReLU row with entries below ``bound``.

    The denominator lies in (2^jlo, 2^jhi]; the secret scale 2^-j is held as
    the integer 2^(shift - j) and products with it are truncated by ``shift``.
    """
    eps = m / cfg.scale
    jlo = math.floor(math.log2(eps)) - 1
    top = m * bound + eps
    if top >= cfg.bound:
        raise RangeError(f"row length {m} with entry bound {bound} overflows the ring")
    jhi = math.ceil(math.log2(top))
    shift = max(cfg.f, jhi)
    # scaled values are <= 1, so the untruncated products stay below 2^(f + shift)
    if cfg.f + shift > cfg.l - 8 or shift - jlo > cfg.l - 8:
        raise RangeError(f"row length {m} with entry bound {bound} leaves no headroom in a {cfg.l}-bit ring")
    return eps, jlo, jhi, shift


def softmax_2relu(ctx: Party, x: FixedShare, *, bound: float = 2.0**12, iterations: int = 6):
    """relu(x) / (sum relu(x) + m*2^-f) along the last axis.

    The denominator is first scaled by a secret power of two into (1/2, 1]
    (one batch of comparisons against public powers of two), so the
    Newton reciprocal runs on a fixed narrow range for any row.
    """
    cfg = ctx.cfg
    m = x.shape[-1]
    eps, jlo, jhi, shift = softmax_bounds(m, cfg, bound)
    with ctx.scope("softmax_2relu"):
        num = yield from relu(ctx, x)
        den = num.sum(axis=-1)
        den = FixedShare(ctx.id, den.elem, cfg)
        if ctx.id == 0:
            den = FixedShare(0, ring.add(den.elem, ring.encode(eps, cfg), cfg), cfg)
        js = np.arange(jlo + 1, jhi)
        thresholds = ctx.const(np.exp2(js.astype(np.float64)))
        above = yield from secure_cmp(ctx, den.reshape(*den.shape, 1), thresholds)
        lead = ctx.const_ring(np.ones(den.shape + (1,), dtype=np.uint64))
        tail = ctx.zeros(den.shape + (1,))
        full = concat([lead, above, tail], axis=-1)
        onehot = full[..., :-1] - full[..., 1:]
        coeffs = ring.as_ring(np.left_shift(1, shift - np.arange(jlo + 1, jhi + 1)).astype(np.int64), cfg)
        scale = FixedShare(ctx.id, ring.mul(onehot.elem, coeffs, cfg), cfg).sum(axis=-1)
        both = concat([num, den.reshape(*den.shape, 1)], axis=-1)
        scaled = yield from secure_mul(ctx, both, scale.reshape(*scale.shape, 1), truncate=False)
        scaled = FixedShare(ctx.id, ring.truncate_share(scaled.elem, shift, ctx.id, cfg), cfg)
        inv = yield from reciprocal(ctx, scaled[..., m], (0.5, 1.0), iterations)
        out = yield from secure_mul(ctx, scaled[..., :m], inv.reshape(*inv.shape, 1))
    return out


def softmax_2relu_plain(x: np.ndarray, cfg: FixedPointConfig = ring.DEFAULT_CONFIG) -> np.ndarray:
    """Plaintext reference of the same formula."""
    x = np.asarray(x, dtype=np.float64)
    num = np.maximum(x, 0.0)
    den = num.sum(axis=-1, keepdims=True) + x.shape[-1] / cfg.scale
    return num / den
