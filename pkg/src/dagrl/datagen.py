"""Synthetic causal datasets and external dataset ingestion.

Four generative models over a randomly sampled DAG are provided: linear
with Gaussian noise, linear with non-Gaussian noise (power-transformed
Gaussians), quadratic with non-Gaussian noise, and functions drawn from a
Gaussian process with an RBF kernel.  Generation is a pure function of the
config (including its seed): identical configs produce bit-identical data.

The on-disk layout is rows = observations with a header; in memory the data
matrix X is (n variables) x (M observations), so loaders transpose.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import gammaln

from . import graphs

MODEL_TAGS = ("linear-gaussian", "lingam", "quadratic", "gp", "external")


@dataclass
class GenConfig:
    n: int
    samples: int
    model_tag: str = "linear-gaussian"
    edge_prob: float = 0.5
    weight_low: float = 0.5   # magnitudes; signs are symmetric +-
    weight_high: float = 2.0
    noise_variance: float = 1.0
    quad_coef_low: float = 0.5
    quad_coef_high: float = 1.0
    quad_zero_rate: float = 0.5
    quad_clip: float = 1e4
    gp_noise_var_low: float = 0.4
    gp_noise_var_high: float = 0.8
    seed: int = 0

    def validate(self):
        if not 0.0 < self.edge_prob < 1.0:
            raise ValueError("edge_prob must lie in (0, 1)")
        if self.samples <= 0:
            raise ValueError("samples must be positive")
        if not 0.0 < self.weight_low < self.weight_high:
            raise ValueError("weight range must satisfy 0 < low < high")
        if self.model_tag not in MODEL_TAGS:
            raise ValueError(f"unknown model tag {self.model_tag!r}")


@dataclass
class Dataset:
    """An (n x M) observation matrix with an optional ground-truth graph."""

    X: np.ndarray
    truth: np.ndarray | None = None
    model_tag: str = "external"
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def samples(self) -> int:
        return self.X.shape[1]

    def zscored(self) -> "Dataset":
        mu = self.X.mean(axis=1, keepdims=True)
        sd = self.X.std(axis=1, keepdims=True)
        if np.any(sd == 0):
            raise ValueError("cannot z-score a constant variable")
        return Dataset((self.X - mu) / sd, self.truth, self.model_tag,
                       dict(self.meta, normalized=True))


def sample_true_dag(cfg: GenConfig, rng: np.random.Generator):
    """Strictly upper-triangular adjacency with Bernoulli(edge_prob) edges.

    Returns the adjacency and a matching weight matrix whose present-edge
    weights are uniform over [-high,-low] u [low,high].
    """
    cfg.validate()
    n = cfg.n
    upper = np.triu(np.ones((n, n)), k=1)
    adjacency = (rng.random((n, n)) < cfg.edge_prob).astype(np.int64) * upper.astype(np.int64)
    magnitude = rng.uniform(cfg.weight_low, cfg.weight_high, size=(n, n))
    sign = np.where(rng.random((n, n)) < 0.5, -1.0, 1.0)
    weights = adjacency * magnitude * sign
    return adjacency, weights


def power_noise(rng: np.random.Generator, size, exponent: float) -> np.ndarray:
    """sign(z) * |z|^p for z ~ N(0,1), rescaled analytically to unit variance.

    Exponents away from 1 make the result non-Gaussian (p < 1 platykurtic,
    p > 1 leptokurtic).
    """
    z = rng.standard_normal(size)
    raw = np.sign(z) * np.abs(z) ** exponent
    # Var = E|z|^(2p) = 2^p * Gamma(p + 1/2) / Gamma(1/2)
    log_var = exponent * np.log(2.0) + gammaln(exponent + 0.5) - gammaln(0.5)
    return raw / np.exp(0.5 * log_var)


def _draw_power_exponent(rng: np.random.Generator) -> float:
    # [0.5, 0.8] u [1.2, 2.0], excluding the Gaussian-preserving p = 1
    if rng.random() < 0.5:
        return float(rng.uniform(0.5, 0.8))
    return float(rng.uniform(1.2, 2.0))


def generate_linear(cfg: GenConfig, dag: np.ndarray, weights: np.ndarray,
                    rng: np.random.Generator) -> Dataset:
    """x_i = sum_j w_ji x_j + N_i evaluated in topological order.

    Gaussian noise for the linear-gaussian tag; unit-variance power-
    transformed noise for the lingam tag.
    """
    if not graphs.is_dag(dag):
        raise ValueError("generate_linear requires an acyclic graph")
    if np.any(np.tril(dag) != 0):
        raise ValueError("generate_linear expects an upper-triangular adjacency")
    n, m = cfg.n, cfg.samples
    scale = np.sqrt(cfg.noise_variance)
    x = np.zeros((n, m))
    for i in range(n):
        if cfg.model_tag == "lingam":
            noise = scale * power_noise(rng, m, _draw_power_exponent(rng))
        else:
            noise = scale * rng.standard_normal(m)
        parents = np.nonzero(dag[:, i])[0]
        x[i] = weights[parents, i] @ x[parents] + noise
    return Dataset(x, dag.copy(), cfg.model_tag, {"config": asdict(cfg)})


def _quadratic_features(parent_values: np.ndarray) -> np.ndarray:
    """Stack first-order and all second-order (cross and squared) terms."""
    k = parent_values.shape[0]
    blocks = [parent_values]
    for a in range(k):
        for b in range(a, k):
            blocks.append((parent_values[a] * parent_values[b])[None, :])
    return np.concatenate(blocks, axis=0)


def generate_quadratic(cfg: GenConfig, dag: np.ndarray, rng: np.random.Generator) -> Dataset:
    """Each node is a sparse quadratic polynomial of its parents plus noise.

    Coefficients are zero at rate quad_zero_rate, otherwise uniform over
    [-high,-low] u [low,high]; columns are clipped to +-quad_clip to keep
    deep chains bounded.
    """
    if not graphs.is_dag(dag):
        raise ValueError("generate_quadratic requires an acyclic graph")
    n, m = cfg.n, cfg.samples
    x = np.zeros((n, m))
    for i in range(n):
        noise = power_noise(rng, m, _draw_power_exponent(rng))
        parents = np.nonzero(dag[:, i])[0]
        value = noise
        if parents.size:
            feats = _quadratic_features(x[parents])
            magnitude = rng.uniform(cfg.quad_coef_low, cfg.quad_coef_high, size=feats.shape[0])
            sign = np.where(rng.random(feats.shape[0]) < 0.5, -1.0, 1.0)
            keep = rng.random(feats.shape[0]) >= cfg.quad_zero_rate
            coefs = magnitude * sign * keep
            value = coefs @ feats + noise
        x[i] = np.clip(value, -cfg.quad_clip, cfg.quad_clip)
    return Dataset(x, dag.copy(), "quadratic", {"config": asdict(cfg)})


def _rbf_kernel(u: np.ndarray, v: np.ndarray, bandwidth: float = 1.0) -> np.ndarray:
    uu = (u * u).sum(axis=1)[:, None]
    vv = (v * v).sum(axis=1)[None, :]
    sq = np.maximum(uu + vv - 2.0 * (u @ v.T), 0.0)
    return np.exp(-sq / (2.0 * bandwidth ** 2))


def _cholesky_with_jitter(k: np.ndarray, jitter: float = 1e-6, jitter_max: float = 1e-2):
    while True:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(k.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > jitter_max:
                raise


def gp_draw(parent_values: np.ndarray, rng: np.random.Generator,
            bandwidth: float = 1.0) -> np.ndarray:
    """One joint sample of a zero-mean RBF-kernel GP at the given inputs.

    ``parent_values`` is (k parents) x (M points); returns M function values.
    Identical input points receive identical function values up to jitter.
    """
    inputs = parent_values.T
    k = _rbf_kernel(inputs, inputs, bandwidth)
    chol = _cholesky_with_jitter(k)
    return chol @ rng.standard_normal(inputs.shape[0])


def generate_gp(cfg: GenConfig, dag: np.ndarray, rng: np.random.Generator) -> Dataset:
    """Node functions drawn from a bandwidth-1 RBF Gaussian process.

    Noise is Gaussian with a per-node variance drawn uniformly from
    [gp_noise_var_low, gp_noise_var_high]; parentless nodes are pure noise.
    """
    if not graphs.is_dag(dag):
        raise ValueError("generate_gp requires an acyclic graph")
    n, m = cfg.n, cfg.samples
    x = np.zeros((n, m))
    for i in range(n):
        sigma2 = rng.uniform(cfg.gp_noise_var_low, cfg.gp_noise_var_high)
        noise = np.sqrt(sigma2) * rng.standard_normal(m)
        parents = np.nonzero(dag[:, i])[0]
        if parents.size:
            x[i] = gp_draw(x[parents], rng) + noise
        else:
            x[i] = noise
    return Dataset(x, dag.copy(), "gp", {"config": asdict(cfg)})


def generate(cfg: GenConfig) -> Dataset:
    """Dispatch on the model tag; deterministic given the config's seed."""
    cfg.validate()
    seq = np.random.SeedSequence(cfg.seed)
    dag_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    dag, weights = sample_true_dag(cfg, dag_rng)
    if cfg.model_tag in ("linear-gaussian", "lingam"):
        ds = generate_linear(cfg, dag, weights, noise_rng)
        ds.meta["weights"] = weights.tolist()
        return ds
    if cfg.model_tag == "quadratic":
        return generate_quadratic(cfg, dag, noise_rng)
    if cfg.model_tag == "gp":
        return generate_gp(cfg, dag, noise_rng)
    raise ValueError(f"cannot generate model tag {cfg.model_tag!r}")


# -- external data -------------------------------------------------------


class ParseError(ValueError):
    pass


def load_external(path, truth_path=None, normalize: bool = False) -> Dataset:
    """Read a header-first CSV of observations (rows) by variables (columns).

    The optional truth graph may be a .json edge list or a .csv matrix.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}: row {line_no} has {len(row)} cells, expected {width}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as err:
                bad = next(i for i, v in enumerate(row) if not _is_number(v))
                raise ParseError(f"{path}: non-numeric cell at row {line_no}, column {bad + 1}") from err
    if not rows:
        raise ParseError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64).T
    truth = graphs.load_graph(truth_path) if truth_path else None
    if truth is not None and truth.shape[0] != x.shape[0]:
        raise ParseError(f"truth graph has {truth.shape[0]} nodes, data has {x.shape[0]}")
    ds = Dataset(x, truth, "external", {"source": str(path)})
    return ds.zscored() if normalize else ds


def _is_number(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def save_dataset(ds: Dataset, data_path, truth_path=None, meta_path=None) -> None:
    """Write observations CSV (+ optional truth JSON and sidecar metadata)."""
    n = ds.n
    with open(data_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"V{i}" for i in range(n)])
        writer.writerows(ds.X.T.tolist())
    if truth_path is not None and ds.truth is not None:
        graphs.save_edge_list_json(ds.truth, truth_path)
    if meta_path is not None:
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump({"model_tag": ds.model_tag, **ds.meta}, fh, indent=2)
            fh.write("\n")


# -- minibatch states -----------------------------------------------------


def draw_state_batch(ds: Dataset, batch: int, depth: int,
                     rng: np.random.Generator) -> np.ndarray:
    """A (batch, n, depth) stack of states, each a without-replacement
    column subset of the observation matrix."""
    if depth > ds.samples:
        raise ValueError(f"state depth {depth} exceeds {ds.samples} observations")
    out = np.empty((batch, ds.n, depth))
    for b in range(batch):
        cols = rng.choice(ds.samples, size=depth, replace=False)
        out[b] = ds.X[:, cols]
    return out
