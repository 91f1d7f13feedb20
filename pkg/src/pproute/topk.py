"""Secure top-k selection: the constant-round unsorted top-k and two baselines.

All selection protocols here operate on the last axis and accept any
leading batch shape. Values are fixed-point shares; after the tie-break
embedding they are distinct integers in the ring.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import ring
from .engine import Party, open_shares
from .errors import RangeError, SelectionError
from .protocols import mul_bit, secure_cmp, secure_mul, secure_mul_many
from .sharing import FixedShare, concat, stack


@dataclass
class TopkMask:
    mask: FixedShare  # integer-scaled bits, exactly k ones per row
    k: int
    tie_bits: int


def tie_bits(n: int) -> int:
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


def embed_tiebreak(ctx: Party, v: FixedShare, n: int | None = None) -> FixedShare:
    """v'_i = v_i * 2^ceil(log2 n) + (n - 1 - i): a strict order, lower index wins ties.

    Local only. Requires |v_i| < 2^(l - 2 - f - ceil(log2 n)).
    """
    n = v.shape[-1] if n is None else n
    c = tie_bits(n)
    if c > ctx.cfg.n_headroom:
        raise RangeError(f"n={n} needs {c} tie-break bits, only {ctx.cfg.n_headroom} reserved")
    shifted = FixedShare(ctx.id, ring.mul(v.elem, np.uint64(1 << c), ctx.cfg), ctx.cfg)
    offsets = np.arange(n - 1, -1, -1, dtype=np.int64)
    return shifted + ctx.const_ring(offsets)


def unsorted_topk(ctx: Party, v: FixedShare, k: int, *, tiebreak: bool = True):
    """Secret mask of the k largest entries in two comparison batches.

    Batch 1 compares every entry with every cyclic shift of the vector
    (n(n-1) comparisons); column sums count how many entries each one beats;
    batch 2 thresholds those counts against the public n - k - 1.
    """
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    with ctx.scope("unsorted_topk"):
        w = embed_tiebreak(ctx, v) if tiebreak else v
        if n == 1:
            return TopkMask(ctx.const_ring(np.ones(v.shape, dtype=np.uint64)), k, 0)
        shifts = np.arange(1, n)
        idx = (np.arange(n)[None, :] + shifts[:, None]) % n  # (n-1, n)
        rows = FixedShare(ctx.id, np.broadcast_to(w.elem[..., None, :], w.shape[:-1] + (n - 1, n)), ctx.cfg)
        rotated = FixedShare(ctx.id, w.elem[..., idx], ctx.cfg)
        beats = yield from secure_cmp(ctx, rows, rotated)
        wins = beats.sum(axis=-2)
        threshold = ctx.const_ring(np.full(wins.shape, n - k - 1, dtype=np.int64))
        mask = yield from secure_cmp(ctx, wins, threshold)
    return TopkMask(mask, k, tie_bits(n) if tiebreak else 0)


def _sentinel(cfg) -> int:
    return -(1 << (cfg.l - 4))


def _radix_schedule(n_pad: int, arity: int) -> list[int]:
    levels = int(math.log2(n_pad))
    if arity == 2:
        return [2] * levels
    if arity == 4:
        return [4] * (levels // 2) + [2] * (levels % 2)
    raise ValueError("arity must be 2 or 4")


def _product_tree(ctx: Party, factors: list[FixedShare]):
    """Product of integer-scaled bit shares, log-depth."""
    while len(factors) > 1:
        pairs = [(factors[i], factors[i + 1]) for i in range(0, len(factors) - 1, 2)]
        prods = yield from secure_mul_many(ctx, pairs, truncate=False)
        if len(factors) % 2:
            prods.append(factors[-1])
        factors = prods
    return factors[0]


def _group_winner(ctx: Party, vals: FixedShare, g: int):
    """One-hot winner indicators for groups of size g (last axis)."""
    pairs = list(itertools.combinations(range(g), 2))
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    c = yield from secure_cmp(ctx, vals[..., ii], vals[..., jj])  # 1(v_i > v_j) for i < j
    one = ctx.const_ring(np.ones(c.shape, dtype=np.uint64))
    lose = one - c  # 1(v_j > v_i), values are distinct
    if g == 2:
        return stack([c[..., 0], lose[..., 0]], axis=-1)
    # factor lists per node, all gathered into one depth-balanced product
    per_node = []
    for i in range(g):
        fs = []
        for p, (a, b) in enumerate(pairs):
            if a == i:
                fs.append(c[..., p])
            elif b == i:
                fs.append(lose[..., p])
        per_node.append(stack(fs, axis=-1))
    factors = stack(per_node, axis=-2)  # (..., g, g-1)
    cols = [factors[..., j] for j in range(g - 1)]
    return (yield from _product_tree(ctx, cols))


def itermax_topk(ctx: Party, v: FixedShare, k: int, *, arity: int = 4):
    """Baseline: k sequential secure-max passes with winner suppression.

    Each pass is a tournament whose levels compare all pairs inside groups of
    ``arity`` nodes and multiplex the winner's value and one-hot position up
    the tree; the pass winner is then pushed below every real value.
    Requires |v_i| < 2^(l - 5 - f - ceil(log2 n)).
    """
    cfg = ctx.cfg
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    n_pad = 1 << tie_bits(n)
    batch = v.shape[:-1]
    with ctx.scope("itermax_topk"):
        w = embed_tiebreak(ctx, v)
        if n_pad > n:
            fill = ctx.const_ring(np.full(batch + (n_pad - n,), _sentinel(cfg), dtype=np.int64))
            w = concat([w, fill], axis=-1)
        penalty = np.int64(-(1 << (cfg.l - 4)))
        picked = ctx.zeros(batch + (n_pad,))
        radices = _radix_schedule(n_pad, arity) if n_pad > 1 else []
        for _ in range(k):
            vals = w
            onehot = ctx.const_ring(np.ones(batch + (n_pad, 1), dtype=np.uint64))
            nodes = n_pad
            for g in radices:
                groups = nodes // g
                gv = vals.reshape(*batch, groups, g)
                win = yield from _group_winner(ctx, gv, g)  # (..., groups, g)
                blk = onehot.shape[-1]
                oh = onehot.reshape(*batch, groups, g, blk)
                sel_v, sel_oh = yield from secure_mul_many(
                    ctx, [(win, gv), (win.reshape(*win.shape, 1), oh)], truncate=False
                )
                vals = sel_v.sum(axis=-1)
                onehot = sel_oh.reshape(*batch, groups, g * blk)
                nodes = groups
            pos = onehot.reshape(*batch, n_pad)
            picked = picked + pos
            w = w + FixedShare(ctx.id, ring.mul(pos.elem, ring.as_ring(penalty, cfg), cfg), cfg)
    return TopkMask(picked[..., :n], k, tie_bits(n))


def bitonic_network(n: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stages of (i, j, descending) comparator index arrays for a power-of-two n."""
    stages = []
    size = 2
    while size <= n:
        j = size // 2
        while j >= 1:
            i = np.arange(n)
            partner = i ^ j
            keep = partner > i
            lo, hi = i[keep], partner[keep]
            desc = (lo & size) == 0
            stages.append((lo, hi, desc))
            j //= 2
        size *= 2
    return stages


def bitonic_sort(ctx: Party, v: FixedShare, payload: FixedShare | None = None):
    """Oblivious descending sort; pads to a power of two with a very negative sentinel.

    ``payload`` (same shape as ``v``) is permuted alongside the values.
    Returns (sorted values, permuted payload or None).
    """
    cfg = ctx.cfg
    n = v.shape[-1]
    n_pad = 1 << tie_bits(n)
    batch = v.shape[:-1]
    with ctx.scope("bitonic_sort"):
        if n_pad > n:
            fill = ctx.const_ring(np.full(batch + (n_pad - n,), _sentinel(cfg), dtype=np.int64))
            v = concat([v, fill], axis=-1)
            if payload is not None:
                payload = concat([payload, ctx.const_ring(np.full(batch + (n_pad - n,), -1, dtype=np.int64))], axis=-1)
        for lo, hi, desc in bitonic_network(n_pad):
            x, y = v[..., lo], v[..., hi]
            # first slot of a descending comparator gets the larger value
            first, second = x, y
            b = yield from secure_cmp(ctx, x, y)
            flip = np.where(desc, 0, 1).astype(np.uint64)
            # b' = b for descending comparators, 1 - b for ascending ones
            one_minus = ctx.const_ring(flip) - b
            bsel = FixedShare(ctx.id, np.where(desc, b.elem, one_minus.elem), cfg)
            terms = [(bsel, first - second)]
            if payload is not None:
                terms.append((bsel, payload[..., lo] - payload[..., hi]))
            prods = yield from secure_mul_many(ctx, terms, truncate=False)
            top = second + prods[0]
            bottom = first + second - top
            new = v.elem.copy()
            new[..., lo] = top.elem
            new[..., hi] = bottom.elem
            v = FixedShare(ctx.id, new, cfg)
            if payload is not None:
                ptop = payload[..., hi] + prods[1]
                pbot = payload[..., lo] + payload[..., hi] - ptop
                pnew = payload.elem.copy()
                pnew[..., lo] = ptop.elem
                pnew[..., hi] = pbot.elem
                payload = FixedShare(ctx.id, pnew, cfg)
    return v, payload


def bitonic_topk(ctx: Party, v: FixedShare, k: int):
    """Tie-broken bitonic sort carrying indices; returns shares of the first k indices."""
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    w = embed_tiebreak(ctx, v)
    idx = ctx.const_ring(np.broadcast_to(np.arange(n, dtype=np.int64), v.shape))
    _, perm = yield from bitonic_sort(ctx, w, idx)
    return perm[..., :k]


def neg_penalty(cfg) -> float:
    """Quarter-range negative score used to knock out unmasked candidates."""
    return -float(2 ** (cfg.l - 3 - 2 * cfg.f))


def masked_select_max(ctx: Party, scores: FixedShare, mask: TopkMask):
    """Public index of the best score among mask positions.

    Scores outside the mask are replaced by a large negative constant, a
    top-1 pass runs on the result, and only its one-hot output is opened.
    """
    if mask.k < 1:
        raise SelectionError("mask selects no candidates")
    cfg = ctx.cfg
    neg = neg_penalty(cfg)
    with ctx.scope("masked_select_max"):
        shifted = FixedShare(ctx.id, scores.elem, cfg)
        if ctx.id == 0:
            shifted = FixedShare(0, ring.sub(scores.elem, ring.encode(neg, cfg), cfg), cfg)
        kept = yield from mul_bit(ctx, mask.mask, shifted)
        if ctx.id == 0:
            kept = FixedShare(0, ring.add(kept.elem, ring.encode(neg, cfg), cfg), cfg)
        best = yield from unsorted_topk(ctx, kept, 1)
        onehot = yield from open_shares(ctx, best.mask)
    onehot = ring.to_signed(onehot, cfg)
    if np.any(onehot.sum(axis=-1) != 1):
        raise SelectionError("opened selection is not one-hot")
    return np.argmax(onehot, axis=-1)


def all_ones_mask(ctx: Party, shape) -> TopkMask:
    return TopkMask(ctx.const_ring(np.ones(shape, dtype=np.uint64)), shape[-1], 0)


def plain_topk(v: np.ndarray, k: int) -> np.ndarray:
    """Plaintext stable top-k mask (lower index wins ties)."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(-v, axis=-1, kind="stable")
    mask = np.zeros(v.shape, dtype=np.int64)
    np.put_along_axis(mask, order[..., :k], 1, axis=-1)
    return mask
