"""The graph-generating policy.

A stack of two-hierarchy multi-head attention layers encodes the state (n
variables by m sampled observations) into per-node embeddings; a bilinear
sigmoid decoder turns embedding pairs into an edge-probability matrix with
a zero diagonal; adjacency matrices are sampled edge-wise from independent
Bernoullis.

The first hierarchy replicates the input across ``gat_heads`` groups, the
second runs ``sd_heads`` scaled dot-product attention sublayers per group;
sublayer outputs are concatenated within a group, projected, and the group
outputs concatenated again.  No residual connections or layer norms by
default; attention can be restricted with an optional binary mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-7  # decoder probabilities are kept inside (0, 1) so log-probs stay finite

ATTENTION_KINDS = ("scaled_dot", "additive")


@dataclass
class SdgatConfig:
    stacks: int = 6
    gat_heads: int = 4
    sd_heads: int = 4
    key_dim: int = 16
    value_dim: int = 64
    out_dim: int = 64
    decoder_hidden: int = 16
    attention: str = "scaled_dot"
    residual: bool = False

    def validate(self):
        if self.value_dim % self.gat_heads or self.out_dim % self.gat_heads:
            raise ValueError("gat_heads must divide value_dim and out_dim")
        if self.value_dim % (self.gat_heads * self.sd_heads):
            raise ValueError("gat_heads * sd_heads must divide value_dim")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.stacks < 1:
            raise ValueError("need at least one attention layer")


class GraphActor:
    """Encoder-decoder policy over edge decisions.

    Parameters live in ``params`` (name -> Tensor) and are updated only by
    an optimizer step; forward passes share them read-only.
    """

    def __init__(self, cfg: SdgatConfig, feature_dim: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.params: dict[str, Tensor] = {}
        heads = cfg.gat_heads * cfg.sd_heads
        value_sub = cfg.value_dim // heads
        for layer in range(cfg.stacks):
            fan_in = feature_dim if layer == 0 else cfg.out_dim
            self.params[f"enc{layer}.wq"] = ad.uniform_init(rng, (fan_in, heads * cfg.key_dim), fan_in)
            self.params[f"enc{layer}.wk"] = ad.uniform_init(rng, (fan_in, heads * cfg.key_dim), fan_in)
            self.params[f"enc{layer}.wv"] = ad.uniform_init(rng, (fan_in, heads * value_sub), fan_in)
            self.params[f"enc{layer}.wo"] = ad.uniform_init(
                rng, (cfg.gat_heads, cfg.value_dim // cfg.gat_heads, cfg.out_dim // cfg.gat_heads),
                cfg.value_dim // cfg.gat_heads)
            if cfg.attention == "additive":
                self.params[f"enc{layer}.asrc"] = ad.uniform_init(rng, (heads, cfg.key_dim, 1), cfg.key_dim)
                self.params[f"enc{layer}.adst"] = ad.uniform_init(rng, (heads, cfg.key_dim, 1), cfg.key_dim)
        self.params["dec.w1"] = ad.uniform_init(rng, (cfg.out_dim, cfg.decoder_hidden), cfg.out_dim)
        self.params["dec.w2"] = ad.uniform_init(rng, (cfg.out_dim, cfg.decoder_hidden), cfg.out_dim)
        self.params["dec.q"] = ad.uniform_init(rng, (cfg.decoder_hidden, 1), cfg.decoder_hidden)

    # -- encoder ---------------------------------------------------------

    def encode(self, states, mask: np.ndarray | None = None) -> Tensor:
        """Map (batch, n, m) states to (batch, n, out_dim) node embeddings.

        ``mask`` is an optional n x n binary matrix; zeros forbid attention
        from row node to column node (imposed additively before softmax).
        """
        x = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=np.float64))
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        mask_bias = None
        if mask is not None:
            mask_bias = np.where(np.asarray(mask) > 0, 0.0, -1e9)
        for layer in range(self.cfg.stacks):
            y = self._attention_layer(x, layer, mask_bias)
            if self.cfg.residual and layer > 0:
                y = y + x
            if not np.all(np.isfinite(y.data)):
                raise ad.NumericError(f"non-finite activations in encoder layer {layer}")
            x = y
        return x

    def _attention_layer(self, x: Tensor, layer: int, mask_bias) -> Tensor:
        cfg = self.cfg
        batch, n, feat = x.shape
        heads = cfg.gat_heads * cfg.sd_heads
        value_sub = cfg.value_dim // heads

        flat = x.reshape((batch * n, feat))
        q = _heads_projection(flat, self.params[f"enc{layer}.wq"], batch, n, heads, cfg.key_dim)
        k = _heads_projection(flat, self.params[f"enc{layer}.wk"], batch, n, heads, cfg.key_dim)
        v = _heads_projection(flat, self.params[f"enc{layer}.wv"], batch, n, heads, value_sub)

        if cfg.attention == "additive":
            src = (q @ self.params[f"enc{layer}.asrc"]).reshape((batch, heads, n, 1))
            dst = (k @ self.params[f"enc{layer}.adst"]).reshape((batch, heads, 1, n))
            scores = _leaky_relu(src + dst)
            if mask_bias is not None:
                scores = scores + mask_bias
            attention = ad.softmax(scores, axis=-1)
            context = attention @ v
        else:
            context = _attention_core(q, k, v, 1.0 / math.sqrt(cfg.key_dim), mask_bias)

        return _group_output(context, self.params[f"enc{layer}.wo"],
                             cfg.gat_heads, cfg.out_dim)

    # -- decoder ---------------------------------------------------------

    def decode(self, enc: Tensor) -> Tensor:
        """Pairwise edge probabilities, diagonal exactly zero.

        probs[i, j] = sigmoid(q . tanh(W1 enc_i + W2 enc_j)), clamped to
        [PROB_FLOOR, 1 - PROB_FLOOR] off the diagonal.
        """
        batch, n, feat = enc.shape
        flat = enc.reshape((batch * n, feat))
        left = (flat @ self.params["dec.w1"]).reshape((batch, n, self.cfg.decoder_hidden))
        right = (flat @ self.params["dec.w2"]).reshape((batch, n, self.cfg.decoder_hidden))
        logits = _pair_scores(left, right, self.params["dec.q"])
        probs = ad.clip(ad.sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
        off_diagonal = 1.0 - np.eye(n)
        return probs * off_diagonal

    def edge_probabilities(self, states, mask=None) -> Tensor:
        return self.decode(self.encode(states, mask))

    # -- checkpointing -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            p.data[...] = arrays[name]


def _leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = (x.data > 0.0).astype(np.float64)
    return x * (mask + slope * (1.0 - mask))


# -- fused tape ops ------------------------------------------------------
#
# One attention layer would otherwise record ~24 small reshape / transpose
# / matmul nodes; fusing them keeps the tape (and the retained working
# set) an order of magnitude smaller.


def _heads_projection(flat: Tensor, w: Tensor, batch: int, n: int,
                      heads: int, dim: int) -> Tensor:
    """(batch*n, feat) @ (feat, heads*dim) regrouped to (batch, heads, n, dim)."""
    out = np.ascontiguousarray(
        (flat.data @ w.data).reshape(batch, n, heads, dim).transpose(0, 2, 1, 3))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(batch * n, heads * dim)
        return g2 @ w.data.T, flat.data.T @ g2

    return ad.custom_op("heads_projection", (flat, w), out, bwd)


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    peak = scores[..., 0].copy()
    for i in range(1, scores.shape[-1]):
        np.maximum(peak, scores[..., i], out=peak)
    scores -= peak[..., None]
    np.exp(scores, out=scores)
    total = scores[..., 0].copy()
    for i in range(1, scores.shape[-1]):
        total += scores[..., i]
    scores /= total[..., None]
    return scores


def _attention_core(q: Tensor, k: Tensor, v: Tensor, scale: float,
                    mask_bias: np.ndarray | None) -> Tensor:
    """softmax(q k^T * scale + mask) @ v over stacked heads, one tape node."""
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    if mask_bias is not None:
        scores += mask_bias
    alpha = _softmax_last(scores)
    out = np.matmul(alpha, v.data)

    def bwd(g):
        g_alpha = np.matmul(g, np.swapaxes(v.data, -1, -2))
        g_v = np.matmul(np.swapaxes(alpha, -1, -2), g)
        prod = g_alpha * alpha
        total = prod[..., 0].copy()
        for i in range(1, prod.shape[-1]):
            total += prod[..., i]
        g_scores = (g_alpha - total[..., None]) * alpha
        g_scores *= scale
        g_q = np.matmul(g_scores, k.data)
        g_k = np.matmul(np.swapaxes(g_scores, -1, -2), q.data)
        return g_q, g_k, g_v

    return ad.custom_op("attention_core", (q, k, v), out, bwd)


def _group_output(context: Tensor, wo: Tensor, groups: int, out_dim: int) -> Tensor:
    """Concatenate head outputs within each group, project per group, and
    concatenate the group outputs: (batch, heads, n, dv) -> (batch, n, out)."""
    batch, heads, n, sub = context.shape
    per_group = heads // groups * sub
    grouped = np.ascontiguousarray(
        context.data.reshape(batch, groups, heads // groups, n, sub)
        .transpose(0, 1, 3, 2, 4)).reshape(batch, groups, n, per_group)
    projected = np.matmul(grouped, wo.data)  # (batch, groups, n, out/groups)
    out = np.ascontiguousarray(projected.transpose(0, 2, 1, 3)).reshape(batch, n, out_dim)

    def bwd(g):
        g_proj = np.ascontiguousarray(
            g.reshape(batch, n, groups, out_dim // groups).transpose(0, 2, 1, 3))
        g_grouped = np.matmul(g_proj, np.swapaxes(wo.data, -1, -2))
        g_wo = np.matmul(np.swapaxes(grouped, -1, -2), g_proj).sum(axis=0)
        g_context = np.ascontiguousarray(
            g_grouped.reshape(batch, groups, n, heads // groups, sub)
            .transpose(0, 1, 3, 2, 4)).reshape(batch, heads, n, sub)
        return g_context, g_wo

    return ad.custom_op("group_output", (context, wo), out, bwd)


def _pair_scores(left: Tensor, right: Tensor, qvec: Tensor) -> Tensor:
    """logits[b, i, j] = q . tanh(left[b, i] + right[b, j]), one tape node."""
    batch, n, hidden = left.shape
    activated = np.tanh(left.data[:, :, None, :] + right.data[:, None, :, :])
    out = (activated.reshape(batch * n * n, hidden) @ qvec.data).reshape(batch, n, n)

    def bwd(g):
        g_q = activated.reshape(batch * n * n, hidden).T @ g.reshape(batch * n * n, 1)
        g_act = g[..., None] * qvec.data[:, 0]
        g_act *= 1.0 - activated * activated
        return g_act.sum(axis=2), g_act.sum(axis=1), g_q

    return ad.custom_op("pair_scores", (left, right, qvec), out, bwd)


# -- sampling and entropy ----------------------------------------------------


def sample_action(probs: np.ndarray, rng: np.random.Generator):
    """Sample one adjacency from independent per-edge Bernoullis.

    Returns (adjacency, total log-probability, per-edge probability of the
    sampled value).  The chosen-probability matrix carries 1.0 on the
    diagonal so diagonal entries never contribute to ratios or log-probs.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    off = ~np.eye(n, dtype=bool)
    action = ((rng.random(probs.shape) < probs) & off).astype(np.int64)
    chosen = np.where(action == 1, probs, 1.0 - probs)
    chosen[~off] = 1.0
    log_prob = float(np.log(chosen[off]).sum())
    return action, log_prob, chosen


def sample_action_batch(probs: np.ndarray, rng: np.random.Generator):
    """Vectorized sampling over a (batch, n, n) probability stack."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    off = ~np.eye(n, dtype=bool)
    actions = ((rng.random(probs.shape) < probs) & off).astype(np.int64)
    chosen = np.where(actions == 1, probs, 1.0 - probs)
    chosen[..., ~off] = 1.0
    log_probs = np.log(chosen[..., off]).sum(axis=-1)
    return actions, log_probs, chosen


def entropy(probs: np.ndarray, full_bernoulli: bool = False) -> float:
    """Mean per-cell exploration entropy of an edge-probability matrix.

    The default form is -(1/n^2) sum_{i != j} p ln p with 0 ln 0 = 0; the
    full-Bernoulli variant also adds the -(1-p) ln(1-p) term.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    off = ~np.eye(n, dtype=bool)
    p = probs[..., off]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
        if full_bernoulli:
            q = 1.0 - p
            terms = terms + np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
    return float(-terms.sum(axis=-1).mean() / (n * n))


def entropy_term(probs: Tensor, full_bernoulli: bool = False) -> Tensor:
    """Differentiable batch entropy, one value per batch element.

    Assumes decoder output: off-diagonal probabilities strictly inside
    (0, 1) and an exactly-zero diagonal (which contributes nothing).
    """
    n = probs.shape[-1]
    diagonal = np.eye(n)
    safe = probs + diagonal  # ln(1) = 0 on the diagonal
    terms = probs * ad.log(safe)
    if full_bernoulli:
        flipped = (1.0 - probs) - diagonal
        safe_flipped = flipped + diagonal
        terms = terms + flipped * ad.log(safe_flipped)
    return terms.sum(axis=(-2, -1)) * (-1.0 / (n * n))
