"""Acceptance criteria 1-9. Each test records one PASS/FAIL line shown in the terminal summary."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from pproute import Session
from pproute.encoder import EncoderWeights, encoder_block, encoder_block_ref
from pproute.evaluation import (
    UNATTAINED,
    audc,
    curve_from_decisions,
    decision_gaps,
    deferral_sweep,
    gen_synth,
    parse_lambdas,
    qnc,
    route_all,
)
from pproute.protocols import (
    reciprocal,
    relu,
    secure_cmp,
    secure_dot,
    secure_mul,
    softmax_2relu,
    softmax_2relu_plain,
)
from pproute.ring import DEFAULT_CONFIG as CFG
from pproute.router import (
    ModelPool,
    cscr_decision_gap,
    route_cscr_plaintext,
    route_cscr_secure,
    route_uniroute_plaintext,
    route_uniroute_secure,
    uniroute_decision_gap,
)
from pproute.sharing import reconstruct, reconstruct_int
from pproute.topk import bitonic_topk, itermax_topk, plain_topk, unsorted_topk

F = 2.0 ** -CFG.f
GAP = 2.0**-6


def _mask(session, fn, v, k):
    m0, m1 = session.run(lambda ctx, x: fn(ctx, x, k), session.share(v))
    return reconstruct_int(m0.mask, m1.mask)


def _vectors(rng, trials, n):
    v = rng.uniform(-100, 100, size=(trials, n))
    # a third of the vectors get injected ties: duplicated entries and coarse rounding
    tied = np.arange(trials) % 3 == 0
    v[tied] = np.round(v[tied] / 25) * 25
    dup = rng.integers(0, n, size=trials)
    v[np.arange(trials), (dup + 1) % n] = v[np.arange(trials), dup]
    return v


def test_c1_unsorted_topk_correctness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad, total, ties = 0, 0, 0
    for n, k in ((8, 2), (32, 4), (128, 4)):
        v = _vectors(rng, 1000, n)
        srt = -np.sort(-v, axis=1)
        ties += int(np.sum(srt[:, k - 1] == srt[:, k]))
        chunk = max(1, 4096 // n)
        s = Session(seed=n, backend="circuit")
        for a in range(0, 1000, chunk):
            got = _mask(s, unsorted_topk, v[a : a + chunk], k)
            bad += int(np.sum(np.any(got != plain_topk(v[a : a + chunk], k), axis=1)))
            total += len(got)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and total == 3000 and elapsed <= 120
    acceptance("1. unsorted top-k correctness", ok,
               f"{total - bad}/{total} exact ({ties} with a tie at the k boundary), {elapsed:.1f}s")
    assert ok


def _rounds(alg, n, k):
    s = Session(seed=0, backend="circuit")
    v = s.share(np.random.default_rng(n).normal(size=n))
    fn = {"unsorted": unsorted_topk, "itermax": itermax_topk, "bitonic": bitonic_topk}[alg]
    s.run(lambda ctx, x: fn(ctx, x, k), v)
    return s.comm.rounds, s.comm.bytes_per_party


def test_c2_constant_rounds(acceptance):
    uns = {n: _rounds("unsorted", n, 4)[0] for n in (8, 32, 128)}
    u64 = _rounds("unsorted", 64, 4)[0]
    it = _rounds("itermax", 64, 4)[0]
    bi = _rounds("bitonic", 64, 4)[0]
    ok = len(set(uns.values())) == 1 and it >= 3 * u64 and bi > it and bi > u64
    acceptance("2. constant rounds", ok,
               f"unsorted {uns} | n=64,k=4: unsorted {u64}, itermax {it}, bitonic {bi}")
    assert ok


def test_c3_volume_scaling(acceptance):
    u32, u64 = (_rounds("unsorted", n, 4)[1] for n in (32, 64))
    i32, i64 = (_rounds("itermax", n, 4)[1] for n in (32, 64))
    ratio = u64 / u32
    quad = ratio / 4.0
    ok = abs(quad - 1) <= 0.10 and i64 / i32 < 4.0 and u64 > i64
    acceptance("3. volume scaling", ok,
               f"unsorted bytes {u32}->{u64} (x{ratio:.3f}, n^2 predicts x4); "
               f"itermax {i32}->{i64} (x{i64 / i32:.3f})")
    assert ok


def test_c4_protocol_oracles(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    N = 10_000
    s = Session(seed=4, backend="circuit")
    report, ok = [], True

    def check(name, good):
        nonlocal ok
        ok &= bool(good)
        report.append(f"{name}={'ok' if good else 'FAIL'}")

    x = rng.uniform(-10, 10, N)
    y = rng.uniform(-10, 10, N)
    xq, yq = reconstruct(*s.share(x)), reconstruct(*s.share(y))
    out = reconstruct(*s.run(secure_mul, s.share(x), s.share(y)))
    check("mul", np.all(np.abs(out - xq * yq) <= 2 * F * (1 + np.abs(xq) + np.abs(yq))))

    y_eq = y.copy()
    y_eq[::10] = x[::10]
    got = reconstruct_int(*s.run(secure_cmp, s.share(x), s.share(y_eq)))
    check("cmp", np.array_equal(got, (xq > reconstruct(*s.share(y_eq))).astype(int)))

    out = reconstruct(*s.run(relu, s.share(x)))
    check("relu", np.all(np.abs(out - np.maximum(xq, 0)) <= 2 * F * (1 + np.abs(xq))))

    r = np.exp(rng.uniform(0, np.log(100), N))
    out = reconstruct(*s.run(reciprocal, s.share(r), range_hint=(1.0, 100.0)))
    check("reciprocal", np.all(np.abs(out * reconstruct(*s.share(r)) - 1) <= 2**-8))

    rows = rng.normal(0, 2, size=(N, 8))
    rq = reconstruct(*s.share(rows))
    out = reconstruct(*s.run(softmax_2relu, s.share(rows)))
    check("softmax_2relu", np.abs(out - softmax_2relu_plain(rq)).max() <= 2**-8 and out.min() >= 0)

    u = rng.normal(size=(N, 32))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = rng.normal(size=(N, 32))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    uq, vq = reconstruct(*s.share(u)), reconstruct(*s.share(v))
    out = reconstruct(*s.run(secure_dot, s.share(u), s.share(v)))
    check("dot", np.all(np.abs(out - (uq * vq).sum(axis=1)) <= 32 * F))

    a = np.round(rng.normal(0, 20, N), 2)
    b = np.round(rng.normal(0, 20, N), 2)
    b[::5] = a[::5]
    bits = []
    for backend in ("circuit", "dealer-oracle"):
        t = Session(seed=11, backend=backend)
        bits.append(reconstruct_int(*t.run(secure_cmp, t.share(a), t.share(b))))
    check("backends-identical", np.array_equal(bits[0], bits[1]))

    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 300
    acceptance("4. protocol oracle suite", ok, f"{', '.join(report)}; {N} trials each, {elapsed:.1f}s")
    assert ok


def test_c5_softmax_and_encoder(acceptance):
    rng = np.random.default_rng(5)
    s = Session(seed=5, backend="circuit")
    sums_ok = True
    worst_sum = 0.0
    for m in (2, 8, 32, 100):
        x = rng.normal(0, 3, size=(500, m))
        x[np.arange(500), rng.integers(0, m, 500)] = rng.uniform(1, 50, 500)  # max >= 1
        out = reconstruct(*s.run(softmax_2relu, s.share(x)))
        dev = np.abs(out.sum(axis=1) - 1).max()
        worst_sum = max(worst_sum, dev)
        sums_ok &= bool(out.min() >= 0 and dev <= 2**-8)
    w = EncoderWeights.random(16, 32, seed=5)
    x = rng.uniform(-1, 1, size=(100, 8, 16))
    e = Session(seed=6, backend="circuit")
    out = reconstruct(*e.run(encoder_block, e.share(x), w))
    dev = float(np.abs(out - encoder_block_ref(x, w, CFG)).max())
    ok = sums_ok and dev <= 2**-6
    acceptance("5. 2ReLU normalization + encoder", ok,
               f"worst |sum-1| {worst_sum:.2e} (<= {2**-8:.2e}); block max-abs {dev:.2e} (<= {2**-6:.2e})")
    assert ok


def _route_instances(rng, policy, want_cond, want_all):
    """Random pools (16 models, d=32), batches of queries, random lambda grid."""
    agree_c = total_c = agree_a = total_a = 0
    seed = 0
    while total_c < want_cond or total_a < want_all:
        seed += 1
        emb = rng.normal(size=(16, 32))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        cen = rng.normal(size=(6, 32))
        cen /= np.linalg.norm(cen, axis=1, keepdims=True)
        pool = ModelPool.from_dict({
            "dim": 32,
            "models": [{"id": f"m{i}", "embedding": emb[i].tolist(), "cost": float(rng.uniform(0.05, 1)),
                        "cluster_errors": rng.uniform(0, 1, 6).tolist()} for i in range(16)],
            "centers": cen.tolist(),
        })
        q = rng.normal(size=(250, 32))
        # bias half of the queries towards models or centers so decisions are not all trivial
        anchors = emb if policy == "cscr" else cen
        q[:125] += 4 * anchors[rng.integers(0, len(anchors), 125)]
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        lams = np.sort(rng.uniform(0, 1, 4))
        s = Session(seed=seed, backend="circuit")
        if policy == "cscr":
            got = route_cscr_secure(s, s.share(q), pool, 4, lams)
            want = np.stack([route_cscr_plaintext(q, pool, 4, l) for l in lams])
            gap = np.stack([cscr_decision_gap(q, pool, 4, l) for l in lams])
        else:
            got = route_uniroute_secure(s, s.share(q), pool, lams)
            want = np.stack([route_uniroute_plaintext(q, pool, l) for l in lams])
            gap = np.stack([uniroute_decision_gap(q, pool, l) for l in lams])
        same = got == want
        if total_a < want_all:
            agree_a += int(same.sum())
            total_a += same.size
        cond = gap > GAP
        agree_c += int(same[cond].sum())
        total_c += int(cond.sum())
    return agree_c, total_c, agree_a, total_a


def test_c6_routing_agreement(acceptance):
    rng = np.random.default_rng(6)
    parts, ok = [], True
    for policy in ("cscr", "uniroute"):
        ac, tc, aa, ta = _route_instances(rng, policy, 10_000, 10_000)
        good = ac == tc and tc >= 10_000 and aa / ta >= 0.99
        ok &= good
        parts.append(f"{policy}: gap>2^-6 {ac}/{tc}, all {aa}/{ta} ({aa / ta:.4%})")
    acceptance("6. routing agreement", ok, "; ".join(parts))
    assert ok


def test_c7_deferral_bracketing(acceptance):
    t0 = time.perf_counter()
    lams = parse_lambdas("0:1:0.05")
    ok, rows = True, []
    for seed in range(1, 6):
        pool, data = gen_synth(20, 500, 32, seed=seed)
        oracle = deferral_sweep("oracle", pool, data, lams)
        rand = deferral_sweep("random", pool, data, lams, seed=seed)
        sec_idx = route_all("cscr", pool, data, lams, k=3, backend="dealer-oracle", seed=seed)
        pl_idx = route_all("plaintext-cscr", pool, data, lams, k=3)
        sec = curve_from_decisions("cscr", pool, data, lams, sec_idx)
        keep = np.all(decision_gaps("cscr", pool, data, lams, k=3) > GAP, axis=0)
        sub = type(data)([data.ids[i] for i in np.flatnonzero(keep)], data.embeddings[keep], data.quality[keep])
        same = (curve_from_decisions("s", pool, sub, lams, sec_idx[:, keep]).raw
                == curve_from_decisions("p", pool, sub, lams, pl_idx[:, keep]).raw)
        bracket = oracle.audc >= sec.audc >= rand.audc - 0.02
        ok &= bool(bracket and same)
        rows.append(f"s{seed}: {oracle.audc:.3f}>={sec.audc:.3f}>={rand.audc:.3f}-0.02 "
                    f"gap-subset {int(keep.sum())}q {'=' if same else '!='}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 600
    acceptance("7. deferral bracketing", ok, "; ".join(rows) + f"; {elapsed:.1f}s")
    assert ok


def test_c8_metrics(acceptance):
    a = audc([(0.0, 0.5), (1.0, 1.0)])
    pool, data = gen_synth(8, 100, 8, seed=8)
    oracle = deferral_sweep("oracle", pool, data, parse_lambdas("0:2:0.1"))
    constant = len({(c, q) for _, c, q in oracle.raw}) == 1
    unatt = qnc([(0.1, 0.4), (0.9, 0.6)], 0.7, 0.5) == UNATTAINED
    ok = a == 0.75 and constant and unatt
    acceptance("8. metrics unit tests", ok, f"audc={a!r}, oracle constant={constant}, qnc unattained={unatt}")
    assert ok


def _cli(tmp, *args):
    res = subprocess.run([sys.executable, "-m", "pproute", *args], cwd=tmp, capture_output=True, timeout=300)
    assert res.returncode == 0, res.stderr.decode()
    files = {p.name: p.read_bytes() for p in sorted(tmp.iterdir()) if p.is_file()}
    return res.stdout, files


def test_c9_determinism(acceptance, tmp_path):
    base = tmp_path / "base"
    base.mkdir()
    subprocess.run([sys.executable, "-m", "pproute", "gen-synth", "--models", "6", "--queries", "40",
                    "--dim", "8", "--seed", "3", "--out", "x_"], cwd=base, check=True, capture_output=True)
    (base / "q.json").write_text(json.dumps({"embedding": [1, 0, 0, 0, 0, 0, 0, 0],
                                             "quality": {f"m{i}": i / 10 for i in range(6)}}))
    pool, data = str(base / "x_pool.json"), str(base / "x_dataset.jsonl")
    commands = {
        "gen-synth": ["gen-synth", "--models", "5", "--queries", "20", "--dim", "4", "--seed", "9", "--out", "g_"],
        "route cscr": ["route", "--pool", pool, "--query", str(base / "q.json"), "--k", "3", "--lambda", "0.3",
                       "--seed", "4"],
        "route uniroute": ["route", "--pool", pool, "--query", str(base / "q.json"), "--policy", "uniroute",
                           "--seed", "4"],
        "route random": ["route", "--pool", pool, "--query", str(base / "q.json"), "--policy", "random",
                         "--seed", "4"],
        "bench-topk": ["bench-topk", "--n", "16", "--k", "3", "--alg", "unsorted", "--trials", "3", "--seed", "2"],
        "bench-topk itermax": ["bench-topk", "--n", "8", "--k", "2", "--alg", "itermax", "--trials", "2"],
        "bench-topk bitonic": ["bench-topk", "--n", "8", "--k", "2", "--alg", "bitonic", "--trials", "2"],
        "deferral": ["deferral", "--pool", pool, "--dataset", data, "--policy", "cscr", "--lambdas", "0:1:0.25",
                     "--seed", "5", "--out", "d_"],
        "encoder-demo": ["encoder-demo", "--s", "4", "--d", "8", "--seed", "1"],
    }
    mismatched = []
    for name, args in commands.items():
        outs = []
        for run in ("a", "b"):
            d = tmp_path / f"{name.replace(' ', '_')}_{run}"
            d.mkdir()
            outs.append(_cli(d, *args))
        if outs[0] != outs[1]:
            mismatched.append(name)
    ok = not mismatched
    acceptance("9. determinism", ok,
               f"{len(commands) - len(mismatched)}/{len(commands)} subcommand runs byte-identical"
               + (f"; differ: {mismatched}" if mismatched else ""))
    assert ok
