"""Lock-step two-party execution, trusted dealer and communication metering.

A party program is a generator. Each ``yield Msg(...)`` is that party's
outgoing message for one communication phase; the value sent back into the
generator is what the party receives in that phase. ``run_lockstep`` drives
both generators phase by phase, so a phase is exactly one communication
round no matter how many elements the messages carry.
"""

from __future__ import annotations

import contextlib
import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Generator

import numpy as np

from . import ring
from .errors import DeadlockError, ProtocolError, ScheduleError
from .ring import DEFAULT_CONFIG, FixedPointConfig
from .sharing import FixedShare, public, share, share_ring, trivial

log = logging.getLogger(__name__)

BACKENDS = ("circuit", "dealer-oracle")
MAX_PHASES = 10**6

PEER = "peer"
TO_DEALER = "dealer"
FROM_DEALER = "dealer-recv"


@dataclass
class Msg:
    label: str
    payload: Any = None
    nbits: int = 0
    to: str = PEER
    op: str | None = None


@dataclass
class LabelStats:
    rounds: int = 0
    bytes_sent: list = field(default_factory=lambda: [0, 0])

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "bytes_sent": list(self.bytes_sent)}


@dataclass
class CommStats:
    rounds: int = 0
    bytes_sent: list = field(default_factory=lambda: [0, 0])
    dealer_offline_bytes: int = 0
    dealer_online_bytes: int = 0
    labels: dict = field(default_factory=dict)

    def record(self, label: str, nbytes: tuple[int, int]) -> None:
        self.rounds += 1
        st = self.labels.setdefault(label, LabelStats())
        st.rounds += 1
        for p in (0, 1):
            self.bytes_sent[p] += nbytes[p]
            st.bytes_sent[p] += nbytes[p]

    def snapshot(self) -> "CommStats":
        return copy.deepcopy(self)

    def since(self, earlier: "CommStats") -> "CommStats":
        out = CommStats(
            rounds=self.rounds - earlier.rounds,
            bytes_sent=[a - b for a, b in zip(self.bytes_sent, earlier.bytes_sent)],
            dealer_offline_bytes=self.dealer_offline_bytes - earlier.dealer_offline_bytes,
            dealer_online_bytes=self.dealer_online_bytes - earlier.dealer_online_bytes,
        )
        for key, st in self.labels.items():
            old = earlier.labels.get(key, LabelStats())
            if st.rounds != old.rounds or st.bytes_sent != old.bytes_sent:
                out.labels[key] = LabelStats(
                    st.rounds - old.rounds, [a - b for a, b in zip(st.bytes_sent, old.bytes_sent)]
                )
        return out

    def matching(self, *segments: str) -> LabelStats:
        """Totals over label paths containing every given path segment."""
        total = LabelStats()
        for key, st in self.labels.items():
            parts = key.split("/")
            if all(s in parts for s in segments):
                total.rounds += st.rounds
                total.bytes_sent[0] += st.bytes_sent[0]
                total.bytes_sent[1] += st.bytes_sent[1]
        return total

    @property
    def bytes_per_party(self) -> int:
        return max(self.bytes_sent)

    def to_dict(self, labels: bool = True) -> dict:
        d = {
            "rounds": self.rounds,
            "bytes_sent": list(self.bytes_sent),
            "bytes_per_party": self.bytes_per_party,
            "dealer_offline_bytes": self.dealer_offline_bytes,
            "dealer_online_bytes": self.dealer_online_bytes,
        }
        if labels:
            d["labels"] = {k: v.to_dict() for k, v in sorted(self.labels.items())}
        return d


@dataclass
class BeaverTriple:
    """One party's shares of arithmetic triples a, b, c = a*b (elementwise)."""

    a: FixedShare
    b: FixedShare
    c: FixedShare


@dataclass
class BoolTriple:
    """One party's XOR shares of packed boolean triples c = a & b."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


@dataclass
class CmpRandomness:
    """Per-comparison masks: arithmetic r, XOR shares of r's bits, AND-gate triples.

    Two boolean triple words per comparison serve every level of the
    comparison tree (each level reads a disjoint set of bit positions).
    """

    r: FixedShare
    r_bits: np.ndarray
    and_g: BoolTriple
    and_e: BoolTriple


class Dealer:
    """Trusted third party issuing correlated randomness.

    Both party programs issue identical request sequences; request ``i`` is
    generated once and each party picks up its own half.
    """

    def __init__(self, cfg: FixedPointConfig, rng: np.random.Generator, comm: CommStats):
        self.cfg = cfg
        self.rng = rng
        self.comm = comm
        self._counter = [0, 0]
        self._store: dict[int, tuple[tuple, list]] = {}
        self._pending_online: list | None = None

    # offline material -------------------------------------------------
    def request(self, party: int, kind: str, shape: tuple):
        i = self._counter[party]
        self._counter[party] += 1
        key = (kind, tuple(shape))
        if i not in self._store:
            self._store[i] = (key, list(self._generate(kind, tuple(shape))))
        stored_key, bundles = self._store[i]
        if stored_key != key:
            raise ScheduleError(f"dealer request {i}: party {party} asked for {key}, peer asked for {stored_key}")
        out = bundles[party]
        bundles[party] = None
        if bundles[0] is None and bundles[1] is None:
            del self._store[i]
        return out

    def _split_arith(self, value: np.ndarray):
        s0 = ring.random_ring(self.rng, value.shape, self.cfg)
        return FixedShare(0, s0, self.cfg), FixedShare(1, ring.sub(value, s0, self.cfg), self.cfg)

    def _split_xor(self, words: np.ndarray):
        s0 = ring.random_words(self.rng, words.shape)
        return s0, s0 ^ words

    def arith_triples(self, shape: tuple) -> tuple[BeaverTriple, BeaverTriple]:
        a = ring.random_ring(self.rng, shape, self.cfg)
        b = ring.random_ring(self.rng, shape, self.cfg)
        c = ring.mul(a, b, self.cfg)
        (a0, a1), (b0, b1), (c0, c1) = self._split_arith(a), self._split_arith(b), self._split_arith(c)
        self.comm.dealer_offline_bytes += 2 * 3 * int(np.prod(shape, dtype=np.int64)) * self.cfg.elem_bytes
        return BeaverTriple(a0, b0, c0), BeaverTriple(a1, b1, c1)

    def bool_triples(self, shape: tuple) -> tuple[BoolTriple, BoolTriple]:
        a = ring.random_words(self.rng, shape)
        b = ring.random_words(self.rng, shape)
        c = a & b
        (a0, a1), (b0, b1), (c0, c1) = self._split_xor(a), self._split_xor(b), self._split_xor(c)
        self.comm.dealer_offline_bytes += 2 * 3 * 8 * int(np.prod(shape, dtype=np.int64))
        return BoolTriple(a0, b0, c0), BoolTriple(a1, b1, c1)

    def cmp_randomness(self, shape: tuple) -> tuple[CmpRandomness, CmpRandomness]:
        r = ring.random_ring(self.rng, shape, self.cfg)
        r0, r1 = self._split_arith(r)
        rb0, rb1 = self._split_xor(r)
        g0, g1 = self.bool_triples(shape)
        e0, e1 = self.bool_triples(shape)
        self.comm.dealer_offline_bytes += 2 * int(np.prod(shape, dtype=np.int64)) * (self.cfg.elem_bytes + 8)
        return CmpRandomness(r0, rb0, g0, e0), CmpRandomness(r1, rb1, g1, e1)

    def _generate(self, kind: str, shape: tuple):
        if kind == "arith":
            return self.arith_triples(shape)
        if kind == "bool":
            return self.bool_triples(shape)
        if kind == "cmp":
            return self.cmp_randomness(shape)
        raise ProtocolError(f"unknown dealer material {kind!r}")

    # online ideal functionality (dealer-oracle comparison backend) -----
    def ideal(self, op: str, payload0, payload1):
        if op != "msb":
            raise ProtocolError(f"unknown ideal functionality {op!r}")
        z = ring.add(payload0, payload1, self.cfg)
        bit = (z >> np.uint64(self.cfg.l - 1)) & np.uint64(1)
        s0 = ring.random_ring(self.rng, bit.shape, self.cfg)
        replies = (s0, ring.sub(bit, s0, self.cfg))
        self.comm.dealer_online_bytes += 2 * int(bit.size) * self.cfg.elem_bytes
        return replies


class Party:
    """Per-party execution context handed to party programs."""

    def __init__(self, party: int, session: "Session"):
        self.id = party
        self.session = session
        self.cfg = session.cfg
        self.backend = session.backend
        self._labels: list[str] = []

    @property
    def label(self) -> str:
        return "/".join(self._labels) if self._labels else "-"

    @contextlib.contextmanager
    def scope(self, name: str):
        self._labels.append(name)
        try:
            yield
        finally:
            self._labels.pop()

    def triples(self, shape) -> BeaverTriple:
        return self.session.dealer.request(self.id, "arith", tuple(shape))

    def bool_triples(self, shape) -> BoolTriple:
        return self.session.dealer.request(self.id, "bool", tuple(shape))

    def cmp_randomness(self, shape) -> CmpRandomness:
        return self.session.dealer.request(self.id, "cmp", tuple(shape))

    # local constructors
    def const(self, x) -> FixedShare:
        """Share of a public real."""
        return public(self.id, x, self.cfg)

    def const_ring(self, e) -> FixedShare:
        return trivial(self.id, 0, e, self.cfg)

    def private(self, owner: int, e) -> FixedShare:
        """Share of ring value(s) that ``owner`` holds in the clear (zero for the other party)."""
        return trivial(self.id, owner, e, self.cfg)

    def zeros(self, shape) -> FixedShare:
        return FixedShare(self.id, np.zeros(shape, dtype=np.uint64), self.cfg)


Program = Generator[Msg, Any, Any]


def exchange(ctx: Party, payload, nbits: int) -> Program:
    """Send ``payload`` to the peer and return the peer's payload (one round)."""
    other = yield Msg(ctx.label, payload, int(nbits))
    return other


def open_shares(ctx: Party, x: FixedShare) -> Program:
    """Reconstruct ``x`` towards both parties; returns public ring elements."""
    with ctx.scope("open"):
        other = yield from exchange(ctx, x.elem, x.size * ctx.cfg.l)
    return ring.add(x.elem, other, ctx.cfg)


def _step(gen: Program, value):
    try:
        return gen.send(value), None, False
    except StopIteration as stop:
        return None, stop.value, True


def run_lockstep(session: "Session", prog0: Program, prog1: Program, max_phases: int | None = None):
    """Run two round-synchronous party programs to completion.

    Returns ``(output0, output1)``. Raises ``ScheduleError`` when the
    programs disagree on a phase and ``DeadlockError`` past the phase bound.
    """
    bound = session.max_phases if max_phases is None else max_phases
    gens = (prog0, prog1)
    msgs: list = [None, None]
    outs: list = [None, None]
    done = [False, False]
    for p in (0, 1):
        msgs[p], outs[p], done[p] = _step(gens[p], None)
    phases = 0
    pending = None
    while not (done[0] and done[1]):
        if done[0] != done[1]:
            waiting = 1 if done[0] else 0
            raise ScheduleError(
                f"party {waiting} waits in phase {phases + 1} ({msgs[waiting].label}) but its peer has finished"
            )
        m0, m1 = msgs
        if m0.to != m1.to or m0.label != m1.label or m0.op != m1.op:
            raise ScheduleError(f"phase {phases + 1}: party 0 sends {m0.label!r}/{m0.to}, party 1 sends {m1.label!r}/{m1.to}")
        phases += 1
        if phases > bound:
            raise DeadlockError(f"exceeded {bound} communication phases")
        nbytes = ((m0.nbits + 7) // 8, (m1.nbits + 7) // 8)
        session.comm.record(m0.label, nbytes)
        if log.isEnabledFor(5):
            log.log(5, "phase %d %s bytes=%s", phases, m0.label, nbytes)
        if m0.to == PEER:
            replies = (m1.payload, m0.payload)
        elif m0.to == TO_DEALER:
            pending = session.dealer.ideal(m0.op, m0.payload, m1.payload)
            replies = (None, None)
        elif m0.to == FROM_DEALER:
            if pending is None:
                raise ScheduleError("receive from dealer without a pending request")
            replies, pending = pending, None
        else:
            raise ProtocolError(f"unknown destination {m0.to!r}")
        for p in (0, 1):
            msgs[p], outs[p], done[p] = _step(gens[p], replies[p])
    return outs[0], outs[1]


class Session:
    """One two-party computation with its dealer, transport metering and seeds."""

    def __init__(
        self,
        cfg: FixedPointConfig = DEFAULT_CONFIG,
        seed: int = 0,
        backend: str = "circuit",
        max_phases: int = MAX_PHASES,
    ):
        if backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
        self.cfg = cfg
        self.seed = seed
        self.backend = backend
        self.max_phases = max_phases
        self.comm = CommStats()
        dealer_seq, client_seq = np.random.SeedSequence(seed).spawn(2)
        self.dealer = Dealer(cfg, np.random.default_rng(dealer_seq), self.comm)
        self.client_rng = np.random.default_rng(client_seq)
        self.parties = (Party(0, self), Party(1, self))

    def share(self, x) -> tuple[FixedShare, FixedShare]:
        """Input sharing by a client that holds ``x`` in the clear."""
        return share(x, self.client_rng, self.cfg)

    def share_ring(self, e) -> tuple[FixedShare, FixedShare]:
        return share_ring(e, self.client_rng, self.cfg)

    def run(self, program: Callable[..., Program], *args, **kwargs):
        """Run ``program(ctx, *args)`` on both parties.

        Arguments given as a ``(FixedShare, FixedShare)`` pair are split so
        each party sees only its own share; anything else is passed to both.
        """
        per_party = ([], [])
        for a in args:
            if _is_pair(a):
                per_party[0].append(a[0])
                per_party[1].append(a[1])
            else:
                per_party[0].append(a)
                per_party[1].append(a)
        kw = ({}, {})
        for k, a in kwargs.items():
            for p in (0, 1):
                kw[p][k] = a[p] if _is_pair(a) else a
        gens = [program(self.parties[p], *per_party[p], **kw[p]) for p in (0, 1)]
        return run_lockstep(self, gens[0], gens[1])

    def open(self, label: str, shares: tuple[FixedShare, FixedShare]) -> np.ndarray:
        def prog(ctx, x):
            with ctx.scope(label):
                return (yield from open_shares(ctx, x))

        out0, out1 = self.run(prog, shares)
        return out0

    def dealer_triples(self, count: int, kind: str = "arithmetic"):
        """Issue ``count`` triples to both parties (test and inspection helper)."""
        if count == 0:
            return None, None
        if kind in ("arithmetic", "arith"):
            return self.dealer.arith_triples((count,))
        if kind in ("boolean", "bool"):
            return self.dealer.bool_triples((count,))
        raise ValueError(f"unknown triple kind {kind!r}")


def _is_pair(a) -> bool:
    return (
        isinstance(a, tuple)
        and len(a) == 2
        and isinstance(a[0], FixedShare)
        and isinstance(a[1], FixedShare)
        and a[0].party == 0
        and a[1].party == 1
    )
