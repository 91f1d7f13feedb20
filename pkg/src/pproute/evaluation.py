"""Synthetic routing benchmarks, deferral-curve sweeps and curve metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .engine import Session
from .errors import ConfigurationError
from .ring import DEFAULT_CONFIG, FixedPointConfig
from .router import (
    ModelDescriptor,
    ModelPool,
    cscr_decision_gap,
    route_cscr_plaintext,
    route_cscr_secure,
    route_oracle,
    route_random,
    route_uniroute_plaintext,
    route_uniroute_secure,
    uniroute_decision_gap,
)

log = logging.getLogger(__name__)

UNATTAINED = "unattained"
SWEEP_POLICIES = ("cscr", "uniroute", "plaintext-cscr", "plaintext-uniroute", "random", "oracle")
GAP_MARGIN = 2.0**-6

# planted-signal weights: similarity, model strength (tied to cost), noise
_W_SIM, _W_MODEL, _W_NOISE = 0.15, 0.08, 0.17


@dataclass
class EvalDataset:
    ids: list
    embeddings: np.ndarray  # (Q, d)
    quality: np.ndarray  # (Q, n) in pool order

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_lines(cls, lines, pool: ModelPool) -> "EvalDataset":
        ids, embs, quals = [], [], []
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                emb = np.asarray(rec["embedding"], dtype=np.float64)
                qmap = rec["quality"]
                missing = [m for m in pool.ids if m not in qmap]
                if missing:
                    raise ConfigurationError(f"line {lineno}: no quality for model(s) {missing[:3]}")
                q = np.array([float(qmap[m]) for m in pool.ids])
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ConfigurationError):
                    raise
                raise ConfigurationError(f"line {lineno}: {exc}") from exc
            if emb.shape != (pool.dim,):
                raise ConfigurationError(f"line {lineno}: embedding length {emb.shape} != pool dim {pool.dim}")
            if abs(np.linalg.norm(emb) - 1.0) > 1e-3:
                raise ConfigurationError(f"line {lineno}: query embedding is not unit norm")
            ids.append(str(rec["id"]))
            embs.append(emb / np.linalg.norm(emb))
            quals.append(q)
        if not ids:
            raise ConfigurationError("dataset has no queries")
        return cls(ids, np.stack(embs), np.stack(quals))

    @classmethod
    def load(cls, path, pool: ModelPool) -> "EvalDataset":
        with open(path) as fh:
            return cls.from_lines(fh, pool)

    def to_lines(self, pool: ModelPool) -> list[str]:
        out = []
        for qid, emb, q in zip(self.ids, self.embeddings, self.quality):
            rec = {"id": qid, "embedding": [float(x) for x in emb], "quality": {m: float(v) for m, v in zip(pool.ids, q)}}
            out.append(json.dumps(rec, sort_keys=True))
        return out


def _unit(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _draw_queries(rng, model_emb, count, dim):
    # queries sit near a random model's direction so similarity is informative
    anchor = rng.integers(0, len(model_emb), size=count)
    return _unit(model_emb[anchor] + rng.normal(0.0, 1.0 / math.sqrt(dim), size=(count, dim)) * 1.5)


def _quality(rng, q_emb, model_emb, strength):
    sims = q_emb @ model_emb.T
    z = (sims - sims.mean()) / (sims.std() + 1e-12)
    noise = rng.normal(size=sims.shape)
    q = 0.5 + _W_SIM * z + _W_MODEL * strength[None, :] + _W_NOISE * noise
    return np.clip(q, 0.0, 1.0)


def gen_synth(models: int, queries: int, dim: int, seed: int, clusters: int = 8):
    """Synthetic pool and dataset with a planted similarity-quality signal.

    Costs are log-uniform on [0.05, 1]; pricier models are somewhat better on
    average. UniRoute centers and per-cluster error rates are fit on a
    separate training sample drawn from the same process.
    """
    if models < 1 or queries < 1 or dim < 1:
        raise ConfigurationError("models, queries and dim must be positive")
    rng = np.random.default_rng(seed)
    emb = _unit(rng.normal(size=(models, dim)))
    log_cost = rng.uniform(math.log(0.05), 0.0, size=models)
    costs = np.exp(log_cost)
    strength = (log_cost - log_cost.mean()) / (log_cost.std() + 1e-12) if models > 1 else np.zeros(1)

    n_train = max(4 * clusters, queries)
    train_q = _draw_queries(rng, emb, n_train, dim)
    train_quality = _quality(rng, train_q, emb, strength)
    k = max(1, min(clusters, n_train))
    centers, labels = kmeans2(train_q, k, seed=rng, minit="++")
    centers = _unit(centers)
    labels = np.argmax(train_q @ centers.T, axis=1)
    errors = np.empty((models, k))
    for c in range(k):
        sel = labels == c
        errors[:, c] = 1.0 - (train_quality[sel].mean(axis=0) if sel.any() else train_quality.mean(axis=0))

    test_q = _draw_queries(rng, emb, queries, dim)
    quality = _quality(rng, test_q, emb, strength)
    width = len(str(models - 1))
    descs = tuple(
        ModelDescriptor(f"m{i:0{width}d}", emb[i], float(costs[i]), errors[i]) for i in range(models)
    )
    pool = ModelPool(descs, centers)
    qwidth = len(str(queries - 1))
    data = EvalDataset([f"q{i:0{qwidth}d}" for i in range(queries)], test_q, quality)
    return pool, data


def planted_correlation(pool: ModelPool, data: EvalDataset) -> float:
    sims = data.embeddings @ pool.embeddings.T
    return float(np.corrcoef(sims.ravel(), data.quality.ravel())[0, 1])


def write_synth(pool: ModelPool, data: EvalDataset, prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    pool_path, data_path = Path(prefix + "pool.json"), Path(prefix + "dataset.jsonl")
    pool_path.parent.mkdir(parents=True, exist_ok=True)
    pool_path.write_text(json.dumps(pool.to_dict(), sort_keys=True) + "\n")
    data_path.write_text("\n".join(data.to_lines(pool)) + "\n")
    return pool_path, data_path


# --------------------------------------------------------------------------
# curves


def dedupe_points(points) -> list[tuple[float, float]]:
    """Sort by cost, keeping the best quality at each distinct cost."""
    best: dict[float, float] = {}
    for c, q in points:
        c, q = float(c), float(q)
        if c not in best or q > best[c]:
            best[c] = q
    return sorted(best.items())


def audc(points) -> float:
    """Trapezoid area over normalized cost [0, 1], flat beyond the end points."""
    pts = dedupe_points(points)
    if not pts:
        raise ValueError("empty curve")
    c = np.array([p[0] for p in pts])
    q = np.array([p[1] for p in pts])
    area = q[0] * c[0] + q[-1] * (1.0 - c[-1])
    if len(pts) > 1:
        area += float(np.sum((c[1:] - c[:-1]) * (q[1:] + q[:-1]) / 2.0))
    return float(area)


def peak(points) -> float:
    pts = dedupe_points(points)
    if not pts:
        raise ValueError("empty curve")
    return max(q for _, q in pts)


def qnc(points, best_quality: float, best_cost: float):
    """Least interpolated curve cost reaching ``best_quality``, relative to ``best_cost``."""
    pts = dedupe_points(points)
    if not pts:
        raise ValueError("empty curve")
    if best_cost <= 0:
        raise ValueError("best single model cost must be positive")
    prev = None
    for c, q in pts:
        if q >= best_quality:
            if prev is None or q == prev[1]:
                hit = c
            else:
                pc, pq = prev
                hit = pc + (best_quality - pq) * (c - pc) / (q - pq)
            return float(hit / best_cost)
        prev = (c, q)
    return UNATTAINED


def best_single_model(pool: ModelPool, data: EvalDataset) -> tuple[int, float, float]:
    """(index, mean quality, normalized cost) of the most accurate single model."""
    means = data.quality.mean(axis=0)
    cand = np.flatnonzero(means == means.max())
    i = int(cand[np.argmin(pool.costs[cand])])
    return i, float(means[i]), float(pool.costs[i] / pool.costs.max())


@dataclass
class DeferralCurve:
    policy: str
    lambdas: list
    raw: list  # (lambda, cost, quality) per grid point
    decisions: np.ndarray = field(repr=False, default=None)  # (L, Q)
    best: tuple = (0, 0.0, 1.0)

    @property
    def points(self) -> list[tuple[float, float]]:
        return dedupe_points((c, q) for _, c, q in self.raw)

    @property
    def audc(self) -> float:
        return audc(self.points)

    @property
    def peak(self) -> float:
        return peak(self.points)

    @property
    def qnc(self):
        _, bq, bc = self.best
        return qnc(self.points, bq, bc)

    def metrics(self) -> dict:
        return {"audc": self.audc, "qnc": self.qnc, "peak": self.peak, "policy": self.policy}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "cost", "quality"])
        for lam, c, q in self.raw:
            w.writerow([repr(float(lam)), repr(float(c)), repr(float(q))])
        return buf.getvalue()


def parse_lambdas(text: str) -> list[float]:
    """'lo:hi:step' (inclusive hi) or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            return [round(lo + i * step, 12) for i in range(n)]
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad lambda grid {text!r}; use lo:hi:step or a comma list") from exc
    if not vals or any(b < a for a, b in zip(vals, vals[1:])):
        raise ConfigurationError("lambda grid must be nonempty and ascending")
    return vals


def route_all(policy: str, pool: ModelPool, data: EvalDataset, lambdas, *, k: int = 3,
              backend: str = "dealer-oracle", seed: int = 0, cfg: FixedPointConfig = DEFAULT_CONFIG,
              chunk: int = 64) -> np.ndarray:
    """Chosen model index for every (lambda, query); shape (L, Q)."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    L, Q = len(lambdas), len(data)
    k = min(k, len(pool))
    if policy == "oracle":
        return np.broadcast_to(route_oracle(pool, data.quality), (L, Q)).copy()
    if policy == "random":
        rng = np.random.default_rng(seed)
        return np.broadcast_to(route_random(pool, rng, size=Q), (L, Q)).copy()
    if policy == "plaintext-cscr":
        return np.stack([route_cscr_plaintext(data.embeddings, pool, k, lam) for lam in lambdas])
    if policy == "plaintext-uniroute":
        return np.stack([route_uniroute_plaintext(data.embeddings, pool, lam) for lam in lambdas])
    if policy not in ("cscr", "uniroute"):
        raise ConfigurationError(f"unknown policy {policy!r}")
    session = Session(cfg=cfg, seed=seed, backend=backend)
    out = np.empty((L, Q), dtype=np.int64)
    for start in range(0, Q, chunk):
        sl = slice(start, min(Q, start + chunk))
        shares = session.share(data.embeddings[sl])
        if policy == "cscr":
            out[:, sl] = route_cscr_secure(session, shares, pool, k, lambdas)
        else:
            out[:, sl] = route_uniroute_secure(session, shares, pool, lambdas)
        log.info("%s: routed %d/%d queries", policy, sl.stop, Q)
    return out


def decision_gaps(policy: str, pool: ModelPool, data: EvalDataset, lambdas, k: int = 3) -> np.ndarray:
    k = min(k, len(pool))
    if policy in ("cscr", "plaintext-cscr"):
        return np.stack([cscr_decision_gap(data.embeddings, pool, k, lam) for lam in lambdas])
    if policy in ("uniroute", "plaintext-uniroute"):
        return np.stack([uniroute_decision_gap(data.embeddings, pool, lam) for lam in lambdas])
    return np.full((len(lambdas), len(data)), np.inf)


def curve_from_decisions(policy: str, pool: ModelPool, data: EvalDataset, lambdas, idx: np.ndarray) -> DeferralCurve:
    costs = pool.costs / pool.costs.max() if pool.costs.max() > 0 else np.zeros(len(pool))
    rows = np.arange(len(data))
    raw = []
    for lam, choice in zip(lambdas, idx):
        raw.append((float(lam), float(costs[choice].mean()), float(data.quality[rows, choice].mean())))
    best = best_single_model(pool, data)
    if pool.costs.max() <= 0:
        best = (best[0], best[1], 1.0)
    return DeferralCurve(policy, [float(x) for x in lambdas], raw, idx, best)


def deferral_sweep(policy: str, pool: ModelPool, data: EvalDataset, lambdas, **kw) -> DeferralCurve:
    lambdas = list(lambdas)
    if not lambdas:
        raise ConfigurationError("lambda grid is empty")
    if data.quality.shape[1] != len(pool):
        raise ConfigurationError("dataset does not cover the pool")
    idx = route_all(policy, pool, data, lambdas, **kw)
    return curve_from_decisions(policy, pool, data, lambdas, idx)
