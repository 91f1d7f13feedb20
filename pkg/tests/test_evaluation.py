import numpy as np
import pytest

from pproute.errors import ConfigurationError
from pproute.evaluation import (
    UNATTAINED,
    EvalDataset,
    audc,
    best_single_model,
    deferral_sweep,
    dedupe_points,
    gen_synth,
    parse_lambdas,
    peak,
    planted_correlation,
    qnc,
    write_synth,
)
from pproute.router import ModelPool

LAMS = parse_lambdas("0:1:0.1")


def test_audc_examples():
    assert audc([(0, 0.5), (1, 1.0)]) == 0.75
    assert audc([(0.3, 0.6)]) == pytest.approx(0.6)
    assert peak([(0.3, 0.6)]) == 0.6
    pts = [(0.2, 0.4), (0.5, 0.7), (0.9, 0.8)]
    assert audc(pts) == audc(pts[::-1]) == audc(pts + [pts[1]])
    with pytest.raises(ValueError):
        audc([])


def test_dedupe_keeps_best():
    assert dedupe_points([(0.5, 0.2), (0.1, 0.3), (0.5, 0.6)]) == [(0.1, 0.3), (0.5, 0.6)]


def test_qnc():
    pts = [(0.1, 0.5), (0.5, 0.9)]
    assert qnc(pts, 0.7, 0.6) == pytest.approx(0.3 / 0.6)
    assert qnc(pts, 0.4, 0.5) == pytest.approx(0.2)
    assert qnc(pts, 0.95, 0.5) == UNATTAINED


def test_parse_lambdas():
    assert parse_lambdas("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert parse_lambdas("0.1,0.2") == [0.1, 0.2]
    for bad in ("1:0:0.1", "a:b:c", "0.3,0.1", ""):
        with pytest.raises(ConfigurationError):
            parse_lambdas(bad)


def test_gen_synth_deterministic(tmp_path):
    a = write_synth(*gen_synth(6, 40, 8, seed=11), tmp_path / "a_")
    b = write_synth(*gen_synth(6, 40, 8, seed=11), tmp_path / "b_")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    pool = ModelPool.load(a[0])
    data = EvalDataset.load(a[1], pool)
    assert len(pool) == 6 and len(data) == 40 and pool.has_uniroute


def test_planted_correlation():
    for seed in (1, 2):
        pool, data = gen_synth(20, 500, 32, seed=seed)
        assert 0.5 <= planted_correlation(pool, data) <= 0.7


def test_single_model():
    pool, data = gen_synth(1, 30, 4, seed=0)
    curves = [deferral_sweep(p, pool, data, LAMS, seed=1) for p in ("cscr", "random", "oracle")]
    assert all(c.points == curves[0].points for c in curves)


def test_oracle_constant_and_random_mean():
    pool, data = gen_synth(10, 500, 16, seed=3)
    oc = deferral_sweep("oracle", pool, data, LAMS)
    assert len(oc.points) == 1
    rc = deferral_sweep("random", pool, data, LAMS, seed=5)
    q = data.quality
    sigma = np.sqrt(q.var() / len(data))
    assert abs(rc.peak - q.mean()) <= 3 * sigma + 0.01


def test_secure_matches_plaintext():
    pool, data = gen_synth(8, 120, 16, seed=4)
    a = deferral_sweep("cscr", pool, data, LAMS, k=3, seed=1)
    b = deferral_sweep("plaintext-cscr", pool, data, LAMS, k=3)
    assert a.raw == b.raw
    best = best_single_model(pool, data)
    assert 0 <= best[0] < 8 and 0 < best[2] <= 1


def test_dataset_coverage(tmp_path):
    pool, data = gen_synth(3, 5, 4, seed=0)
    lines = data.to_lines(pool)
    lines[2] = lines[2].replace('"m1"', '"zz"')
    with pytest.raises(ConfigurationError):
        EvalDataset.from_lines(lines, pool)
