import numpy as np
import pytest

from pproute import Session
from pproute.engine import Msg, exchange, open_shares, run_lockstep
from pproute.errors import DeadlockError, ScheduleError
from pproute.protocols import secure_mul
from pproute.sharing import reconstruct, reconstruct_ring


def _noop(ctx):
    return None
    yield


def test_empty_programs(session):
    assert session.run(_noop) == (None, None)
    assert session.comm.rounds == 0


def test_open_metering(session):
    x = session.share(np.array(1.5))
    out = session.open("t", x)
    assert session.comm.rounds == 1
    assert session.comm.bytes_sent == [8, 8]
    assert abs(float(out.view(np.int64)) / 65536 - 1.5) < 1e-9
    session.open("t", session.share(np.arange(1000.0)))
    assert session.comm.rounds == 2
    assert session.comm.bytes_sent == [8008, 8008]
    session.open("t", x)
    assert session.comm.rounds == 3
    assert session.comm.labels["t/open"].rounds == 3


def test_mul_one_round(session):
    out = session.run(secure_mul, session.share(np.array(2.0)), session.share(np.array(3.0)))
    assert abs(reconstruct(*out) - 6.0) <= 2**-14
    assert session.comm.rounds == 1
    assert session.comm.dealer_offline_bytes > 0


def test_dealer_triples(session):
    t0, t1 = session.dealer_triples(10_000)
    a = reconstruct_ring(t0.a, t1.a)
    b = reconstruct_ring(t0.b, t1.b)
    c = reconstruct_ring(t0.c, t1.c)
    with np.errstate(over="ignore"):
        assert np.array_equal(a * b, c)
    assert session.dealer_triples(0) == (None, None)
    b0, b1 = session.dealer_triples(1000, "boolean")
    assert np.array_equal((b0.a ^ b1.a) & (b0.b ^ b1.b), b0.c ^ b1.c)
    assert session.comm.rounds == 0


def test_cmp_randomness_bits(session):
    r0, r1 = session.dealer._generate("cmp", (500,))
    r = reconstruct_ring(r0.r, r1.r)
    bits = r0.r_bits ^ r1.r_bits
    assert np.array_equal(bits, r)


def test_schedule_mismatch_label():
    s = Session(seed=0)

    def p0(ctx):
        yield Msg("a", 1, 8)

    def p1(ctx):
        yield Msg("b", 1, 8)

    with pytest.raises(ScheduleError):
        run_lockstep(s, p0(s.parties[0]), p1(s.parties[1]))


def test_one_party_finishes_early():
    s = Session(seed=0)

    def p0(ctx):
        yield from exchange(ctx, 1, 8)

    with pytest.raises(ScheduleError):
        run_lockstep(s, p0(s.parties[0]), _noop(s.parties[1]))


def test_deadlock_bound():
    s = Session(seed=0, max_phases=50)

    def forever(ctx):
        while True:
            yield from exchange(ctx, 0, 1)

    with pytest.raises(DeadlockError):
        s.run(forever)


def test_determinism():
    def prog(ctx, x, y):
        z = yield from secure_mul(ctx, x, y)
        return (yield from open_shares(ctx, z))

    outs = []
    for _ in range(2):
        s = Session(seed=7)
        r = s.run(prog, s.share(np.linspace(-2, 2, 9)), s.share(np.linspace(3, -1, 9)))
        outs.append((r[0].tobytes(), s.comm.to_dict()))
    assert outs[0] == outs[1]


def test_since_and_matching(session):
    session.open("x", session.share(np.zeros(3)))
    snap = session.comm.snapshot()
    session.run(secure_mul, session.share(np.ones(4)), session.share(np.ones(4)))
    d = session.comm.since(snap)
    assert d.rounds == 1 and d.bytes_sent == [64, 64]
    assert session.comm.matching("secure_mul").rounds == 1
    assert session.comm.matching("open").rounds == 1
