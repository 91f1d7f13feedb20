"""pproute command line: routing, top-k benchmarks, deferral sweeps, data generation."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import EncoderWeights, encoder_block, encoder_block_ref
from .engine import BACKENDS, Session
from .errors import ConfigurationError, ProtocolError, RangeError
from .evaluation import (
    EvalDataset,
    SWEEP_POLICIES,
    deferral_sweep,
    gen_synth,
    parse_lambdas,
    planted_correlation,
    write_synth,
)
from .ring import FixedPointConfig
from .router import (
    POLICIES,
    ModelPool,
    route_cscr_plaintext,
    route_cscr_secure,
    route_oracle,
    route_random,
    route_uniroute_plaintext,
    route_uniroute_secure,
)
from .sharing import reconstruct, reconstruct_int
from .topk import bitonic_topk, itermax_topk, plain_topk, unsorted_topk

log = logging.getLogger("pproute")

EXIT_VALIDATION = 2
EXIT_PROTOCOL = 3
TOPK_ALGS = ("unsorted", "itermax", "bitonic", "brute")
LOG_LEVELS = {"off": None, "info": logging.INFO, "trace": logging.DEBUG}


def _setup_logging() -> None:
    level_name = os.environ.get("PPROUTE_LOG", "").strip().lower()
    if level_name and level_name not in LOG_LEVELS:
        raise ConfigurationError(f"PPROUTE_LOG must be one of {sorted(LOG_LEVELS)}")
    root = logging.getLogger("pproute")
    root.handlers.clear()
    root.propagate = False
    if level_name == "off":
        root.addHandler(logging.NullHandler())
        root.setLevel(logging.CRITICAL + 1)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(LOG_LEVELS.get(level_name) or logging.WARNING)


def _cfg(args) -> FixedPointConfig:
    try:
        return FixedPointConfig(l=args.ring_bits, f=args.frac_bits)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def _run_config(args) -> dict:
    out = {"subcommand": args.command, "version": __version__}
    for key, val in sorted(vars(args).items()):
        if key in ("command", "func", "ring_bits", "frac_bits"):
            continue
        out[key] = str(val) if isinstance(val, Path) else val
    out["fixed_point"] = _cfg(args).to_dict()
    return out


def _emit(obj: dict, out: Path | None = None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: malformed JSON ({exc})") from exc


def _load_pool(path: Path) -> ModelPool:
    if not Path(path).exists():
        raise ConfigurationError(f"{path}: no such file")
    return ModelPool.load(path)


# --------------------------------------------------------------------------
# route


def cmd_route(args) -> int:
    cfg = _cfg(args)
    pool = _load_pool(args.pool)
    query = _read_json(args.query)
    if isinstance(query, list):
        query = {"embedding": query}
    if not isinstance(query, dict) or "embedding" not in query:
        raise ConfigurationError("query file must hold an embedding list or {\"embedding\": [...]}")
    try:
        e = np.asarray(query["embedding"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad query embedding: {exc}") from exc
    if e.shape != (pool.dim,):
        raise ConfigurationError(f"query dimension {e.shape} != pool dimension {pool.dim}")
    norm = float(np.linalg.norm(e))
    if not np.isfinite(norm) or norm == 0.0:
        raise ConfigurationError("query embedding must be finite and nonzero")
    e = e / norm  # the query owner normalizes before sharing
    if args.policy in ("cscr", "plaintext-cscr") and not 1 <= args.k <= len(pool):
        raise ConfigurationError(f"--k must be in [1, {len(pool)}], got {args.k}")

    session = Session(cfg=cfg, seed=args.seed, backend=args.backend)
    if args.policy == "cscr":
        idx = route_cscr_secure(session, session.share(e), pool, args.k, args.lam).index
    elif args.policy == "uniroute":
        idx = route_uniroute_secure(session, session.share(e), pool, args.lam).index
    elif args.policy == "plaintext-cscr":
        idx = int(route_cscr_plaintext(e, pool, args.k, args.lam))
    elif args.policy == "plaintext-uniroute":
        if not pool.has_uniroute:
            raise ConfigurationError("UniRoute needs centers and cluster_errors for every model")
        idx = int(route_uniroute_plaintext(e, pool, args.lam))
    elif args.policy == "random":
        idx = int(route_random(pool, np.random.default_rng(args.seed)))
    else:
        qmap = query.get("quality")
        if not isinstance(qmap, dict) or any(m not in qmap for m in pool.ids):
            raise ConfigurationError("oracle policy needs a per-model \"quality\" map in the query file")
        idx = int(route_oracle(pool, [float(qmap[m]) for m in pool.ids]))
    _emit({
        "model_id": pool.ids[idx],
        "index": idx,
        "rounds": session.comm.rounds,
        "bytes_per_party": session.comm.bytes_per_party,
        "policy": args.policy,
        "backend": args.backend,
        "config": _run_config(args),
    }, args.out)
    return 0


# --------------------------------------------------------------------------
# bench-topk


def _topk_trial(session: Session, alg: str, v: np.ndarray, k: int) -> np.ndarray:
    shares = session.share(v)
    if alg == "unsorted":
        m0, m1 = session.run(lambda ctx, x: unsorted_topk(ctx, x, k), shares)
        return reconstruct_int(m0.mask, m1.mask).astype(np.int64)
    if alg == "itermax":
        m0, m1 = session.run(lambda ctx, x: itermax_topk(ctx, x, k), shares)
        return reconstruct_int(m0.mask, m1.mask).astype(np.int64)
    p0, p1 = session.run(lambda ctx, x: bitonic_topk(ctx, x, k), shares)
    mask = np.zeros(v.shape, dtype=np.int64)
    np.put_along_axis(mask, reconstruct_int(p0, p1).astype(np.int64), 1, axis=-1)
    return mask


def bench_topk(n: int, k: int, alg: str, backend: str, trials: int, seed: int, cfg: FixedPointConfig) -> dict:
    if alg not in TOPK_ALGS:
        raise ConfigurationError(f"--alg must be one of {TOPK_ALGS}")
    if n < 1 or not 1 <= k <= n or trials < 1:
        raise ConfigurationError("need n >= 1, 1 <= k <= n and trials >= 1")
    rng = np.random.default_rng(seed)
    session = Session(cfg=cfg, seed=seed, backend=backend)
    records = []
    for t in range(trials):
        # coarse grid so that ties occur
        v = np.round(rng.uniform(-8.0, 8.0, size=n), 2)
        want = plain_topk(v, k)
        before = session.comm.snapshot()
        got = want.copy() if alg == "brute" else _topk_trial(session, alg, v, k)
        used = session.comm.since(before)
        records.append({
            "trial": t,
            "rounds": used.rounds,
            "bytes_per_party": used.bytes_per_party,
            "agree_with_plaintext": bool(np.array_equal(got, want)),
        })
    rounds = sorted({r["rounds"] for r in records})
    agree = sum(r["agree_with_plaintext"] for r in records) / trials
    return {
        "alg": alg,
        "n": n,
        "k": k,
        "backend": backend,
        "rounds": rounds[0] if len(rounds) == 1 else rounds,
        "bytes_per_party": records[0]["bytes_per_party"],
        "agree_with_plaintext": agree == 1.0,
        "plaintext_agreement_rate": agree,
        "trials": records,
    }


def cmd_bench_topk(args) -> int:
    res = bench_topk(args.n, args.k, args.alg, args.backend, args.trials, args.seed, _cfg(args))
    res["config"] = _run_config(args)
    _emit(res, args.out)
    return 0


# --------------------------------------------------------------------------
# deferral / gen-synth / encoder-demo


def cmd_deferral(args) -> int:
    pool = _load_pool(args.pool)
    if not Path(args.dataset).exists():
        raise ConfigurationError(f"{args.dataset}: no such file")
    data = EvalDataset.load(args.dataset, pool)
    lambdas = parse_lambdas(args.lambdas)
    if args.policy in ("uniroute", "plaintext-uniroute") and not pool.has_uniroute:
        raise ConfigurationError("UniRoute needs centers and cluster_errors for every model")
    curve = deferral_sweep(args.policy, pool, data, lambdas, k=args.k, backend=args.backend,
                           seed=args.seed, cfg=_cfg(args))
    prefix = str(args.out)
    csv_path, json_path = Path(prefix + "curve.csv"), Path(prefix + "metrics.json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(curve.csv_text())
    metrics = curve.metrics()
    idx, bq, bc = curve.best
    metrics.update({
        "seed": args.seed,
        "backend": args.backend,
        "best_single_model": {"model_id": pool.ids[idx], "quality": bq, "cost": bc},
        "points": [list(p) for p in curve.points],
        "config": _run_config(args),
    })
    _emit(metrics, json_path)
    _emit({"curve": str(csv_path), "metrics": str(json_path), "audc": metrics["audc"]})
    return 0


def cmd_gen_synth(args) -> int:
    pool, data = gen_synth(args.models, args.queries, args.dim, args.seed, clusters=args.clusters)
    pool_path, data_path = write_synth(pool, data, args.out)
    _emit({
        "pool": str(pool_path),
        "dataset": str(data_path),
        "models": len(pool),
        "queries": len(data),
        "planted_correlation": planted_correlation(pool, data) if len(pool) * len(data) > 1 else None,
        "config": _run_config(args),
    })
    return 0


def cmd_encoder_demo(args) -> int:
    cfg = _cfg(args)
    if args.s < 1 or args.d < 1:
        raise ConfigurationError("--s and --d must be positive")
    if args.weights is not None:
        weights = EncoderWeights.load(args.weights)
        if weights.d != args.d:
            raise ConfigurationError(f"weights have d={weights.d}, --d is {args.d}")
    else:
        weights = EncoderWeights.random(args.d, args.d_ff, seed=args.seed)
    rng = np.random.default_rng([args.seed, 1])
    x = rng.uniform(-1.0, 1.0, size=(args.s, args.d))
    session = Session(cfg=cfg, seed=args.seed, backend=args.backend)
    y0, y1 = session.run(encoder_block, session.share(x), weights)
    dev = float(np.max(np.abs(reconstruct(y0, y1) - encoder_block_ref(x, weights, cfg))))
    _emit({
        "max_abs_deviation": dev,
        "tolerance": 2.0**-6,
        "within_tolerance": dev <= 2.0**-6,
        "comm": session.comm.to_dict(labels=False),
        "config": _run_config(args),
    }, args.out)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pproute", description="Two-party private LLM routing toolkit")
    p.add_argument("--version", action="version", version=f"pproute {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, backend_default="circuit"):
        sp.add_argument("--backend", choices=BACKENDS, default=backend_default)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--ring-bits", type=int, default=64, help="ring width l (default 64)")
        sp.add_argument("--frac-bits", type=int, default=16, help="fractional bits f (default 16)")

    sp = sub.add_parser("route", help="route one query")
    sp.add_argument("--pool", type=Path, required=True)
    sp.add_argument("--query", type=Path, required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.0)
    sp.add_argument("--policy", choices=POLICIES, default="cscr")
    sp.add_argument("--out", type=Path, default=None)
    common(sp)
    sp.set_defaults(func=cmd_route)

    sp = sub.add_parser("bench-topk", help="benchmark secure top-k protocols")
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--alg", choices=TOPK_ALGS, default="unsorted")
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--out", type=Path, default=None)
    common(sp)
    sp.set_defaults(func=cmd_bench_topk)

    sp = sub.add_parser("deferral", help="sweep lambda and write a deferral curve")
    sp.add_argument("--pool", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--policy", choices=SWEEP_POLICIES, default="cscr")
    sp.add_argument("--lambdas", default="0:1:0.05", help="lo:hi:step or comma list (default 0:1:0.05)")
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--out", default="deferral_", help="output prefix for curve.csv and metrics.json")
    common(sp, backend_default="dealer-oracle")
    sp.set_defaults(func=cmd_deferral)

    sp = sub.add_parser("gen-synth", help="generate a synthetic pool and dataset")
    sp.add_argument("--models", type=int, default=20)
    sp.add_argument("--queries", type=int, default=500)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--clusters", type=int, default=8)
    sp.add_argument("--out", default="synth_", help="output prefix for pool.json and dataset.jsonl")
    common(sp)
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("encoder-demo", help="run the MPC-friendly block against its plaintext oracle")
    sp.add_argument("--s", type=int, default=8)
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--d-ff", type=int, default=32)
    sp.add_argument("--weights", type=Path, default=None)
    sp.add_argument("--out", type=Path, default=None)
    common(sp)
    sp.set_defaults(func=cmd_encoder_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigurationError, RangeError, ValueError, OSError) as exc:
        print(f"pproute: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ProtocolError as exc:
        print(f"pproute: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
