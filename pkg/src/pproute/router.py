"""Embedding-based routing policies, secure and plaintext.

Plaintext policies return pool indices. The secure policies run as party
programs inside a ``Session``; only the chosen index is ever opened.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ring
from .engine import Party, Session
from .errors import ConfigurationError
from .protocols import secure_dot
from .sharing import FixedShare, add_public, mul_public_int
from .topk import all_ones_mask, masked_select_max, unsorted_topk

log = logging.getLogger(__name__)

NORM_TOL = 1e-6
RENORM_TOL = 1e-3
POLICIES = ("cscr", "uniroute", "random", "oracle", "plaintext-cscr", "plaintext-uniroute")


def _unit_rows(a: np.ndarray, what: str) -> np.ndarray:
    norms = np.atleast_1d(np.linalg.norm(a, axis=-1))
    off = np.abs(norms - 1.0)
    if np.any(off >= RENORM_TOL):
        bad = int(np.argmax(off))
        raise ConfigurationError(f"{what} {bad} has norm {norms[bad]:.6g}, expected unit norm")
    if np.any(off > NORM_TOL):
        log.warning("re-normalizing %d %s vector(s) off unit norm by < %g", int((off > NORM_TOL).sum()), what, RENORM_TOL)
        a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    return a


@dataclass(frozen=True)
class ModelDescriptor:
    id: str
    embedding: np.ndarray
    cost: float
    cluster_errors: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "embedding": [float(x) for x in self.embedding], "cost": float(self.cost)}
        if self.cluster_errors is not None:
            d["cluster_errors"] = [float(x) for x in self.cluster_errors]
        return d


@dataclass(frozen=True)
class ModelPool:
    models: tuple
    centers: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.models:
            raise ConfigurationError("model pool is empty")
        dims = {m.embedding.shape for m in self.models}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ConfigurationError("model embeddings must share one dimension")
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("model ids must be unique")
        for m in self.models:
            if not np.isfinite(m.cost) or m.cost < 0:
                raise ConfigurationError(f"model {m.id}: cost must be a finite nonnegative number")
        if self.centers is not None and self.centers.shape[-1] != self.dim:
            raise ConfigurationError("centers and embeddings differ in dimension")

    @property
    def dim(self) -> int:
        return int(self.models[0].embedding.shape[0])

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.models]

    def __len__(self) -> int:
        return len(self.models)

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([m.embedding for m in self.models])

    @property
    def costs(self) -> np.ndarray:
        return np.array([m.cost for m in self.models], dtype=np.float64)

    @property
    def has_uniroute(self) -> bool:
        return self.centers is not None and all(m.cluster_errors is not None for m in self.models)

    @property
    def cluster_errors(self) -> np.ndarray:
        if not self.has_uniroute:
            raise ConfigurationError("pool has no centers/cluster_errors for UniRoute")
        errs = np.stack([m.cluster_errors for m in self.models])
        if errs.shape[1] != len(self.centers):
            raise ConfigurationError("cluster_errors length must equal the number of centers")
        return errs

    @classmethod
    def from_dict(cls, data: dict) -> "ModelPool":
        try:
            dim = int(data["dim"])
            raw = data["models"]
            models = []
            for m in raw:
                emb = np.asarray(m["embedding"], dtype=np.float64)
                if emb.shape != (dim,):
                    raise ConfigurationError(f"model {m.get('id')}: embedding length {emb.shape} != dim {dim}")
                if not np.all(np.isfinite(emb)):
                    raise ConfigurationError(f"model {m.get('id')}: non-finite embedding")
                emb = _unit_rows(emb, "model embedding")
                errs = m.get("cluster_errors")
                errs = None if errs is None else np.asarray(errs, dtype=np.float64)
                models.append(ModelDescriptor(str(m["id"]), emb, float(m["cost"]), errs))
            centers = data.get("centers")
            if centers is not None:
                centers = np.asarray(centers, dtype=np.float64)
                if centers.ndim != 2 or centers.shape[1] != dim:
                    raise ConfigurationError("centers must be a K x dim matrix")
                centers = _unit_rows(centers, "center")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid pool: {exc}") from exc
        pool = cls(tuple(models), centers)
        if pool.centers is not None and any(m.cluster_errors is not None for m in models):
            pool.cluster_errors  # shape check
        return pool

    @classmethod
    def load(cls, path) -> "ModelPool":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: malformed JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = {"dim": self.dim, "models": [m.to_dict() for m in self.models]}
        if self.centers is not None:
            d["centers"] = [[float(x) for x in row] for row in self.centers]
        return d


@dataclass
class RouteDecision:
    model_id: str
    index: int
    policy: str
    comm: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "index": self.index, "policy": self.policy, "comm": self.comm}


def _check_query(e: np.ndarray, pool: ModelPool) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != pool.dim:
        raise ConfigurationError(f"query dimension {e.shape[-1]} != pool dimension {pool.dim}")
    return e


def _check_k(k: int, pool: ModelPool) -> None:
    if not 1 <= k <= len(pool):
        raise ConfigurationError(f"k must be in [1, {len(pool)}], got {k}")


def _stable_argmax(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=-1)  # first occurrence wins


def _stable_topk_mask(x: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-x, axis=-1, kind="stable")
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


# --------------------------------------------------------------------------
# plaintext


def cscr_scores(e, pool: ModelPool, lam: float):
    sims = _check_query(e, pool) @ pool.embeddings.T
    return sims, sims - lam * pool.costs


def route_cscr_plaintext(e, pool: ModelPool, k: int, lam: float):
    """Index of argmax cos - lam*cost among the k nearest models (batched over leading axes)."""
    _check_k(k, pool)
    sims, scores = cscr_scores(e, pool, lam)
    cand = _stable_topk_mask(sims, k)
    return _stable_argmax(np.where(cand, scores, -np.inf))


def uniroute_objective(e, pool: ModelPool, lam: float):
    e = _check_query(e, pool)
    errs = pool.cluster_errors
    csims = e @ pool.centers.T
    cluster = _stable_argmax(csims)
    obj = -(errs[:, cluster].T + lam * pool.costs)
    return csims, obj


def route_uniroute_plaintext(e, pool: ModelPool, lam: float):
    """Assign the query to its nearest center and minimize that cluster's error + lam*cost."""
    _, obj = uniroute_objective(e, pool, lam)
    return _stable_argmax(obj)


def route_random(pool: ModelPool, rng: np.random.Generator, size=None):
    return rng.integers(0, len(pool), size=size)


def route_oracle(pool: ModelPool, quality) -> np.ndarray:
    """Most accurate model, then cheapest, then lowest index."""
    q = np.asarray(quality, dtype=np.float64)
    if q.shape[-1] != len(pool):
        raise ConfigurationError("quality vector must cover every pool model")
    best = q == q.max(axis=-1, keepdims=True)
    costs = np.where(best, pool.costs, np.inf)
    return _stable_argmax(-costs)


def _top_two_gap(x: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
    if allowed is not None:
        x = np.where(allowed, x, -np.inf)
    if x.shape[-1] < 2:
        return np.full(x.shape[:-1], np.inf)
    part = -np.sort(-x, axis=-1)
    gap = part[..., 0] - part[..., 1]
    return np.where(np.isfinite(gap), gap, np.inf)


def cscr_decision_gap(e, pool: ModelPool, k: int, lam: float) -> np.ndarray:
    """Smallest plaintext margin a fixed-point error would have to overcome.

    Minimum of the retrieval boundary gap (k-th vs (k+1)-th similarity) and
    the top-two gap among the retrieved candidates' scores.
    """
    sims, scores = cscr_scores(e, pool, lam)
    n = len(pool)
    srt = -np.sort(-sims, axis=-1)
    retr = srt[..., k - 1] - srt[..., k] if k < n else np.full(sims.shape[:-1], np.inf)
    sel = _top_two_gap(scores, _stable_topk_mask(sims, k))
    return np.minimum(retr, sel)


def uniroute_decision_gap(e, pool: ModelPool, lam: float) -> np.ndarray:
    csims, obj = uniroute_objective(e, pool, lam)
    return np.minimum(_top_two_gap(csims), _top_two_gap(obj))


# --------------------------------------------------------------------------
# secure


def cscr_program(ctx: Party, e: FixedShare, embeddings: np.ndarray, costs: np.ndarray, k: int, lams):
    """Party program; ``e`` is (..., d). Returns public indices of shape (len(lams), ...)."""
    cfg = ctx.cfg
    lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
    with ctx.scope("cscr"):
        d = ctx.private(1, ring.encode(embeddings, cfg))
        q = e.reshape(*e.shape[:-1], 1, e.shape[-1])
        sims = yield from secure_dot(ctx, q, d)
        mask = yield from unsorted_topk(ctx, sims, k)
        pen = lams.reshape((-1,) + (1,) * sims.ndim) * costs
        scores = add_public(sims.broadcast_to(pen.shape[:1] + sims.shape), -pen)
        idx = yield from masked_select_max(ctx, scores, mask)
    return idx


def uniroute_program(ctx: Party, e: FixedShare, centers: np.ndarray, errors: np.ndarray, costs: np.ndarray, lams):
    cfg = ctx.cfg
    lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
    with ctx.scope("uniroute"):
        c = ctx.private(1, ring.encode(centers, cfg))
        q = e.reshape(*e.shape[:-1], 1, e.shape[-1])
        csims = yield from secure_dot(ctx, q, c)
        z = (yield from unsorted_topk(ctx, csims, 1)).mask  # one-hot, never opened
        zz = z.reshape(*z.shape[:-1], 1, z.shape[-1])
        err = mul_public_int(zz, ring.encode(errors, cfg)).sum(axis=-1)  # (..., n)
        pen = lams.reshape((-1,) + (1,) * err.ndim) * costs
        obj = add_public(-err.broadcast_to(pen.shape[:1] + err.shape), -pen)
        idx = yield from masked_select_max(ctx, obj, all_ones_mask(ctx, obj.shape))
    return idx


def _decision(session: Session, pool: ModelPool, idx, policy: str, before) -> RouteDecision | np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim == 0:
        i = int(idx)
        return RouteDecision(pool.ids[i], i, policy, session.comm.since(before).to_dict(labels=False))
    return idx


def route_cscr_secure(session: Session, e_shares, pool: ModelPool, k: int, lam):
    """Secure CSCR routing of shared query embedding(s).

    With a single query and a scalar ``lam`` a ``RouteDecision`` is returned;
    batched queries or a λ grid give an index array of shape (len(lams), ...).
    """
    _check_k(k, pool)
    if e_shares[0].shape[-1] != pool.dim:
        raise ConfigurationError(f"query dimension {e_shares[0].shape[-1]} != pool dimension {pool.dim}")
    before = session.comm.snapshot()
    idx, _ = session.run(cscr_program, e_shares, pool.embeddings, pool.costs, k, lam)
    if np.ndim(lam) == 0:
        idx = idx[0]
    return _decision(session, pool, idx, "cscr", before)


def route_uniroute_secure(session: Session, e_shares, pool: ModelPool, lam):
    if not pool.has_uniroute:
        raise ConfigurationError("UniRoute needs centers and cluster_errors for every model")
    if e_shares[0].shape[-1] != pool.dim:
        raise ConfigurationError(f"query dimension {e_shares[0].shape[-1]} != pool dimension {pool.dim}")
    before = session.comm.snapshot()
    idx, _ = session.run(uniroute_program, e_shares, pool.centers, pool.cluster_errors, pool.costs, lam)
    if np.ndim(lam) == 0:
        idx = idx[0]
    return _decision(session, pool, idx, "uniroute", before)
