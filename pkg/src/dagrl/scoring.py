"""Regression-based BIC scores, penalty assembly, and score caching.

Two BIC variants are provided: per-node noise variances ("separate") and a
pooled equal-variance form ("pooled").  Regressors: ordinary least squares,
quadratic least squares, or RBF kernel ridge with a median-heuristic
bandwidth.  Residual sums per (child, parent set) and whole-graph scores
are both cached, so re-scoring a graph never re-runs a regression.

Raw scores are normalized into [0, score_ceiling] between two anchors: the
score of the complete directed graph (lower) and of the empty graph (upper,
later tightened by the best DAG score seen).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import graphs
from .datagen import Dataset

RSS_FLOOR = 1e-12  # keeps log-likelihood terms finite on interpolating fits

REGRESSORS = ("linear", "quadratic", "gp")
BIC_VARIANTS = ("separate", "pooled")


class DegenerateDataError(ValueError):
    """The empty graph does not score above the complete graph."""


@dataclass
class ScoreConfig:
    bic_variant: str = "pooled"
    regressor: str = "linear"
    gp_subsample: int = 512
    gp_ridge: float = 0.1
    score_ceiling: float = 10.0

    def validate(self):
        if self.bic_variant not in BIC_VARIANTS:
            raise ValueError(f"unknown BIC variant {self.bic_variant!r}")
        if self.regressor not in REGRESSORS:
            raise ValueError(f"unknown regressor {self.regressor!r}")
        if self.gp_subsample < 2:
            raise ValueError("gp_subsample must be >= 2")


@dataclass
class ScoredGraph:
    """A graph with its cached score components.

    ``reward`` is recomputable for any penalty weights without re-running
    any regression; the cycle penalty and the non-DAG indicator are both
    zero whenever the graph is acyclic.
    """

    adjacency: np.ndarray
    bic_raw: float
    bic_normalized: float
    cycle_penalty: float
    non_dag: int

    def reward(self, cycle_weight: float, indicator_weight: float) -> float:
        return -(self.bic_normalized
                 + cycle_weight * self.cycle_penalty
                 + indicator_weight * self.non_dag)


def fingerprint(adjacency: np.ndarray) -> bytes:
    """Canonical exact key for a binary matrix (collision-free for n <= 64)."""
    return np.packbits(np.asarray(adjacency, dtype=np.uint8).reshape(-1)).tobytes()


def unfingerprint(fp: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(fp, dtype=np.uint8), count=n * n)
    return bits.reshape(n, n).astype(np.int64)


class ScoreCache:
    """Append-only store of raw score components keyed by fingerprint.

    Optionally persists each insert as a JSON line so interrupted runs can
    be resumed without re-scoring.
    """

    def __init__(self, n: int, persist_path=None):
        self.n = n
        self.index = {}
        self.fingerprints = []
        self.bic_raw = []
        self.cycle_penalty = []
        self.non_dag = []
        self._persist_path = persist_path
        self._persist_handle = None
        if persist_path is not None:
            self._load_persisted()
            self._persist_handle = open(persist_path, "a", encoding="utf-8")

    def _load_persisted(self):
        try:
            fh = open(self._persist_path, "r", encoding="utf-8")
        except FileNotFoundError:
            return
        with fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                self._insert(bytes.fromhex(row["fp"]), row["bic_raw"],
                             row["cl"], row["ind"], persist=False)

    def __len__(self):
        return len(self.fingerprints)

    def __contains__(self, fp: bytes):
        return fp in self.index

    def get(self, fp: bytes):
        i = self.index.get(fp)
        if i is None:
            return None
        return self.bic_raw[i], self.cycle_penalty[i], self.non_dag[i]

    def _insert(self, fp: bytes, bic_raw: float, cl: float, ind: int, persist: bool = True):
        if fp in self.index:
            return
        self.index[fp] = len(self.fingerprints)
        self.fingerprints.append(fp)
        self.bic_raw.append(float(bic_raw))
        self.cycle_penalty.append(float(cl))
        self.non_dag.append(int(ind))
        if persist and self._persist_handle is not None:
            self._persist_handle.write(json.dumps(
                {"fp": fp.hex(), "bic_raw": bic_raw, "cl": cl, "ind": ind}) + "\n")
            self._persist_handle.flush()

    def add(self, fp: bytes, bic_raw: float, cl: float, ind: int):
        self._insert(fp, bic_raw, cl, ind)

    def arrays(self):
        return (np.asarray(self.bic_raw), np.asarray(self.cycle_penalty),
                np.asarray(self.non_dag))

    def close(self):
        if self._persist_handle is not None:
            self._persist_handle.close()
            self._persist_handle = None


# -- regressors ------------------------------------------------------------


def fit_predict(x: np.ndarray, child: int, parents, regressor: str = "linear",
                gp_subsample: int = 512, gp_ridge: float = 0.1) -> np.ndarray:
    """Predict the child variable from its parents; empty parents give the mean.

    ``x`` is (n x M).  Linear and quadratic use least squares with an
    intercept (least-norm on rank-deficient designs); the GP path is kernel
    ridge with an RBF kernel, median-heuristic bandwidth, fit on a
    deterministic row subsample and evaluated at all rows.
    """
    parents = sorted(int(p) for p in parents)
    if child in parents:
        raise ValueError("a node cannot be its own parent")
    y = x[child]
    m = y.shape[0]
    if not parents:
        return np.full(m, y.mean())
    inputs = x[parents]
    if regressor == "linear":
        design = np.concatenate([inputs.T, np.ones((m, 1))], axis=1)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return design @ coef
    if regressor == "quadratic":
        feats = _quadratic_design(inputs)
        design = np.concatenate([feats.T, np.ones((m, 1))], axis=1)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return design @ coef
    if regressor == "gp":
        return _gp_predict(inputs, y, gp_subsample, gp_ridge)
    raise ValueError(f"unknown regressor {regressor!r}")


def _quadratic_design(inputs: np.ndarray) -> np.ndarray:
    k = inputs.shape[0]
    blocks = [inputs]
    for a in range(k):
        for b in range(a, k):
            blocks.append((inputs[a] * inputs[b])[None, :])
    return np.concatenate(blocks, axis=0)


def _gp_predict(inputs: np.ndarray, y: np.ndarray, subsample: int, ridge: float) -> np.ndarray:
    m = y.shape[0]
    take = min(subsample, m)
    # deterministic, evenly spaced subsample keeps scores reproducible
    idx = np.unique(np.linspace(0, m - 1, take).round().astype(np.int64))
    train = inputs[:, idx].T
    y_train = y[idx]
    dists = pdist(train)
    positive = dists[dists > 0]
    bandwidth = float(np.median(positive)) if positive.size else 1.0
    k_train = _rbf(train, train, bandwidth)
    mean = y_train.mean()
    alpha = np.linalg.solve(k_train + ridge * np.eye(train.shape[0]), y_train - mean)
    k_cross = _rbf(inputs.T, train, bandwidth)
    return k_cross @ alpha + mean


def _rbf(u: np.ndarray, v: np.ndarray, bandwidth: float) -> np.ndarray:
    uu = (u * u).sum(axis=1)[:, None]
    vv = (v * v).sum(axis=1)[None, :]
    sq = np.maximum(uu + vv - 2.0 * (u @ v.T), 0.0)
    return np.exp(-sq / (2.0 * bandwidth ** 2))


# -- BIC scores -------------------------------------------------------------


def bic_separate_variance(adjacency: np.ndarray, x: np.ndarray,
                          regressor: str = "linear", **gp_kwargs) -> float:
    """sum_i M ln(RSS_i / M) + (edge count) ln M."""
    m = x.shape[1]
    total = 0.0
    for child in range(x.shape[0]):
        parents = np.nonzero(adjacency[:, child])[0]
        resid = x[child] - fit_predict(x, child, parents, regressor, **gp_kwargs)
        rss = max(float(resid @ resid), RSS_FLOOR)
        total += m * np.log(rss / m)
    return total + float(adjacency.sum()) * np.log(m)


def bic_pooled_variance(adjacency: np.ndarray, x: np.ndarray,
                        regressor: str = "linear", **gp_kwargs) -> float:
    """M n ln(sum_i RSS_i / (M n)) + (edge count) ln M."""
    n, m = x.shape
    pooled = 0.0
    for child in range(n):
        parents = np.nonzero(adjacency[:, child])[0]
        resid = x[child] - fit_predict(x, child, parents, regressor, **gp_kwargs)
        pooled += float(resid @ resid)
    pooled = max(pooled, RSS_FLOOR)
    return m * n * np.log(pooled / (m * n)) + float(adjacency.sum()) * np.log(m)


class Scorer:
    """Scores adjacency matrices against one dataset with caching.

    Per-(child, parent set) residual sums are memoized, so the cost of
    scoring decomposes over nodes and repeated structure is free.  Anchors
    for normalization are set by :meth:`compute_anchors` and the upper
    anchor may be tightened later via :meth:`tighten_upper_anchor`.
    """

    def __init__(self, dataset: Dataset, config: ScoreConfig | None = None,
                 cache: ScoreCache | None = None):
        self.dataset = dataset
        self.config = config or ScoreConfig()
        self.config.validate()
        self.cache = cache if cache is not None else ScoreCache(dataset.n)
        if self.cache.n != dataset.n:
            raise ValueError("cache node count does not match the dataset")
        self.lower_anchor = None
        self.upper_anchor = None
        self._rss = {}
        self.stats = {"fits": 0, "graph_hits": 0, "graph_misses": 0}

    # -- node-level ----------------------------------------------------

    def node_rss(self, child: int, parents) -> float:
        key = (child, tuple(sorted(int(p) for p in parents)))
        hit = self._rss.get(key)
        if hit is not None:
            return hit
        x = self.dataset.X
        predicted = fit_predict(x, child, key[1], self.config.regressor,
                                gp_subsample=self.config.gp_subsample,
                                gp_ridge=self.config.gp_ridge)
        self.stats["fits"] += 1
        resid = x[child] - predicted
        rss = float(resid @ resid)
        self._rss[key] = rss
        return rss

    def bic(self, adjacency: np.ndarray) -> float:
        n, m = self.dataset.X.shape
        edges = float(np.asarray(adjacency).sum())
        rss = [self.node_rss(i, np.nonzero(adjacency[:, i])[0]) for i in range(n)]
        if self.config.bic_variant == "separate":
            fit_term = sum(m * np.log(max(r, RSS_FLOOR) / m) for r in rss)
        else:
            fit_term = m * n * np.log(max(sum(rss), RSS_FLOOR) / (m * n))
        return float(fit_term + edges * np.log(m))

    # -- anchors and normalization --------------------------------------

    def compute_anchors(self):
        """Lower anchor: complete directed graph; upper anchor: empty graph."""
        n = self.dataset.n
        complete = np.ones((n, n), dtype=np.int64) - np.eye(n, dtype=np.int64)
        empty = np.zeros((n, n), dtype=np.int64)
        lower = self.bic(complete)
        upper = self.bic(empty)
        if not upper > lower:
            raise DegenerateDataError(
                f"empty-graph score {upper:.6g} does not exceed complete-graph score {lower:.6g}")
        self.lower_anchor = lower
        self.upper_anchor = upper
        return lower, upper

    def tighten_upper_anchor(self, candidate: float) -> bool:
        """Lower the upper anchor to ``candidate`` if it keeps the anchor order."""
        if candidate < self.upper_anchor and candidate > self.lower_anchor:
            self.upper_anchor = float(candidate)
            return True
        return False

    def normalized(self, bic_raw) -> np.ndarray | float:
        if self.lower_anchor is None:
            self.compute_anchors()
        span = self.upper_anchor - self.lower_anchor
        ceiling = self.config.score_ceiling
        value = ceiling * (np.asarray(bic_raw, dtype=np.float64) - self.lower_anchor) / span
        return np.clip(value, 0.0, ceiling)

    # -- graph-level -----------------------------------------------------

    def score(self, adjacency: np.ndarray) -> ScoredGraph:
        adjacency = np.asarray(adjacency, dtype=np.int64)
        fp = fingerprint(adjacency)
        cached = self.cache.get(fp)
        if cached is not None:
            self.stats["graph_hits"] += 1
            bic_raw, cl, ind = cached
        else:
            self.stats["graph_misses"] += 1
            bic_raw = self.bic(adjacency)
            dag = graphs.is_dag(adjacency)
            cl = 0.0 if dag else graphs.acyclicity_penalty(adjacency)
            ind = 0 if dag else 1
            self.cache.add(fp, bic_raw, cl, ind)
        return ScoredGraph(
            adjacency=adjacency,
            bic_raw=float(bic_raw),
            bic_normalized=float(self.normalized(bic_raw)),
            cycle_penalty=float(cl),
            non_dag=int(ind),
        )

    def reward_table(self, cycle_weight: float, indicator_weight: float) -> np.ndarray:
        """Rewards of every cached graph under the given penalty weights."""
        bic_raw, cl, ind = self.cache.arrays()
        if bic_raw.size == 0:
            return bic_raw
        return -(self.normalized(bic_raw) + cycle_weight * cl + indicator_weight * ind)
