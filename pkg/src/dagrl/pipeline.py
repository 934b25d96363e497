"""Training-procedure orchestration.

The loop draws state batches, samples graphs from the policy, scores them
(normalized BIC plus weighted acyclicity penalties), and applies the
selected optimizer step.  On a fixed interval the penalty weights are
raised (cycle weight additively, non-DAG indicator weight multiplicatively,
capped by the upper score anchor), the upper anchor is tightened to the
best DAG score seen, and all recorded graphs are re-ranked under the new
weights.  The final output is the best-rewarded recorded DAG, greedily
pruned; every distinct generated graph stays recoverable from the score
cache.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import algorithms as alg
from . import autodiff as ad
from . import datagen, graphs, scoring
from .actor import SdgatConfig
from .critic import CriticConfig

ALGORITHMS = ("reinforce", "psr", "trc", "ppo")


@dataclass
class ProcedureConfig:
    iterations: int = 10000
    batch_size: int = 64
    state_depth: int = 64
    algorithm: str = "trc"
    update_interval: int = 1000
    cycle_weight_init: float = 0.0
    cycle_weight_step: float = 1.0        # additive increment
    cycle_weight_cap: float = 10.0
    indicator_weight_init: float = 1.0
    indicator_weight_factor: float = 10.0  # multiplicative increment
    indicator_weight_cap: float | None = None  # None tracks the upper score anchor
    entropy_weight: float = 0.001
    moving_avg_rate: float = 0.99
    replay_factor: int = 10               # buffer capacity = replay_factor * batch_size
    priority_exponent: float = 0.6
    clip_radius: float = 0.1
    kl_threshold: float = 0.035
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    eval_every: int = 2000
    checkpoint_every: int = 0
    greedy_prune_tolerance: float = 0.0
    threshold_prune: float | None = None
    seed: int = 0

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.cycle_weight_step < 0:
            raise ValueError("cycle_weight_step must be >= 0")
        if self.indicator_weight_factor <= 1:
            raise ValueError("indicator_weight_factor must exceed 1")
        if self.iterations < 0 or self.batch_size < 1 or self.state_depth < 1:
            raise ValueError("iterations, batch_size and state_depth must be sensible")


class RunAbort(RuntimeError):
    """Raised when a run stops early; carries the partial record."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class RunRecord:
    """Everything a completed (or aborted) run leaves behind."""

    iterations_run: int = 0
    log: list = field(default_factory=list)
    best_fingerprint: bytes | None = None
    best_reward: float = -np.inf
    best_dag_fingerprint: bytes | None = None
    best_dag_reward: float = -np.inf
    bic_min_dag: float | None = None
    best_history: list = field(default_factory=list)  # (iteration, best DAG fingerprint)
    cycle_weight: float = 0.0
    indicator_weight: float = 0.0
    lower_anchor: float | None = None
    upper_anchor: float | None = None
    wall_clock: float = 0.0
    aborted: str | None = None
    scorer: scoring.Scorer | None = field(default=None, repr=False)
    agent: alg.ActorCritic | None = field(default=None, repr=False)

    def best_dag(self, n: int) -> np.ndarray | None:
        if self.best_dag_fingerprint is None:
            return None
        return scoring.unfingerprint(self.best_dag_fingerprint, n)


def _rerank(record: RunRecord, scorer: scoring.Scorer, cycle_weight: float,
            indicator_weight: float):
    """Re-rank every recorded graph under the current penalty weights."""
    rewards = scorer.reward_table(cycle_weight, indicator_weight)
    if rewards.size == 0:
        return
    _, _, non_dag = scorer.cache.arrays()
    best = int(np.argmax(rewards))
    record.best_fingerprint = scorer.cache.fingerprints[best]
    record.best_reward = float(rewards[best])
    dag_idx = np.nonzero(non_dag == 0)[0]
    if dag_idx.size:
        best_dag = dag_idx[int(np.argmax(rewards[dag_idx]))]
        record.best_dag_fingerprint = scorer.cache.fingerprints[best_dag]
        record.best_dag_reward = float(rewards[best_dag])


def run_procedure(dataset: datagen.Dataset, procedure: ProcedureConfig,
                  score_cfg: scoring.ScoreConfig | None = None,
                  sdgat: SdgatConfig | None = None,
                  critic_cfg: CriticConfig | None = None,
                  cache: scoring.ScoreCache | None = None,
                  log_path=None, checkpoint_path=None) -> RunRecord:
    """Run the full search loop and return its record.

    Degenerate score anchors raise immediately; a non-finite training loss
    checkpoints (when a path is given) and raises :class:`RunAbort` with
    the partial record attached.
    """
    procedure.validate()
    scorer = scoring.Scorer(dataset, score_cfg, cache)
    scorer.compute_anchors()

    seq = np.random.SeedSequence(procedure.seed)
    init_rng, state_rng, action_rng, replay_rng = (np.random.default_rng(s) for s in seq.spawn(4))

    agent = alg.ActorCritic.build(
        feature_dim=procedure.state_depth, rng=init_rng, sdgat=sdgat,
        critic_cfg=critic_cfg, actor_lr=procedure.actor_lr, critic_lr=procedure.critic_lr)
    buffer = alg.ReplayBuffer(procedure.replay_factor * procedure.batch_size)
    moving_avg = alg.MovingAverage(procedure.moving_avg_rate)
    trc_cfg = alg.TrcConfig(procedure.clip_radius, procedure.kl_threshold,
                            procedure.entropy_weight)

    record = RunRecord(cycle_weight=procedure.cycle_weight_init,
                       indicator_weight=procedure.indicator_weight_init,
                       lower_anchor=scorer.lower_anchor,
                       upper_anchor=scorer.upper_anchor)
    cycle_weight = procedure.cycle_weight_init
    indicator_weight = procedure.indicator_weight_init

    log_handle = open(log_path, "w", encoding="utf-8") if log_path else None
    started = time.perf_counter()
    try:
        for t in range(1, procedure.iterations + 1):
            states = datagen.draw_state_batch(dataset, procedure.batch_size,
                                              procedure.state_depth, state_rng)
            batch = alg.rollout(agent, states, action_rng)

            rewards = np.empty(len(batch))
            fingerprints = []
            for b in range(len(batch)):
                scored = scorer.score(batch.actions[b])
                fp = scoring.fingerprint(batch.actions[b])
                fingerprints.append(fp)
                reward = scored.reward(cycle_weight, indicator_weight)
                rewards[b] = reward
                if reward > record.best_reward:
                    record.best_reward = reward
                    record.best_fingerprint = fp
                if scored.non_dag == 0:
                    if record.bic_min_dag is None or scored.bic_raw < record.bic_min_dag:
                        record.bic_min_dag = scored.bic_raw
                    if reward > record.best_dag_reward:
                        record.best_dag_reward = reward
                        record.best_dag_fingerprint = fp
            batch.rewards = rewards
            batch.fingerprints = fingerprints

            try:
                if procedure.algorithm == "reinforce":
                    step = alg.reinforce_step(batch, agent, moving_avg,
                                              procedure.entropy_weight)
                elif procedure.algorithm == "psr":
                    step = alg.psr_step(batch, agent, buffer, moving_avg,
                                        procedure.entropy_weight,
                                        procedure.priority_exponent, replay_rng)
                elif procedure.algorithm == "trc":
                    step = alg.trc_step(batch, agent, buffer, moving_avg, trc_cfg,
                                        procedure.priority_exponent, replay_rng)
                else:
                    step = alg.ppo_step(batch, agent, buffer, moving_avg, trc_cfg,
                                        procedure.priority_exponent, replay_rng)
            except ad.NumericError as err:
                record.aborted = str(err)
                record.iterations_run = t
                record.scorer = scorer
                record.agent = agent
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, agent, sdgat or SdgatConfig())
                raise RunAbort(f"iteration {t}: {err}", record) from err

            entry = {
                "iteration": t,
                "reward_mean": float(rewards.mean()),
                "reward_std": float(rewards.std()),
                "actor_loss": step.actor_loss,
                "critic_loss": step.critic_loss,
                "baseline": step.baseline,
                "cycle_weight": cycle_weight,
                "indicator_weight": indicator_weight,
                "buffer_size": step.diagnostics.get("buffer_size", 0),
            }
            if "clip_fraction" in step.diagnostics:
                entry["clip_fraction"] = step.diagnostics["clip_fraction"]
            record.log.append(entry)
            if log_handle:
                log_handle.write(json.dumps(entry) + "\n")

            if procedure.eval_every and (t % procedure.eval_every == 0 or t == procedure.iterations):
                record.best_history.append((t, record.best_dag_fingerprint))

            if t % procedure.update_interval == 0:
                # tighten the upper anchor when the best-rewarded graph is a DAG
                if record.best_fingerprint is not None:
                    cached = scorer.cache.get(record.best_fingerprint)
                    if cached is not None and cached[2] == 0:
                        scorer.tighten_upper_anchor(cached[0])
                cycle_weight = min(cycle_weight + procedure.cycle_weight_step,
                                   procedure.cycle_weight_cap)
                indicator_cap = (procedure.indicator_weight_cap
                                 if procedure.indicator_weight_cap is not None
                                 else scorer.upper_anchor)
                indicator_weight = min(indicator_weight * procedure.indicator_weight_factor,
                                       indicator_cap)
                _rerank(record, scorer, cycle_weight, indicator_weight)
                # keep replayed targets consistent with the new weights
                table = scorer.reward_table(cycle_weight, indicator_weight)
                if table.size:
                    buffer.refresh_rewards(lambda fp: table[scorer.cache.index[fp]])

            if procedure.checkpoint_every and checkpoint_path and t % procedure.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, agent, sdgat or SdgatConfig())

            record.iterations_run = t
    finally:
        record.cycle_weight = cycle_weight
        record.indicator_weight = indicator_weight
        record.lower_anchor = scorer.lower_anchor
        record.upper_anchor = scorer.upper_anchor
        record.wall_clock = time.perf_counter() - started
        if log_handle:
            log_handle.close()

    if checkpoint_path:
        save_checkpoint(checkpoint_path, agent, sdgat or SdgatConfig())
    record.scorer = scorer
    record.agent = agent
    return record


# -- checkpoints ---------------------------------------------------------


CHECKPOINT_SCHEMA = "dagrl-checkpoint-v1"


def save_checkpoint(path, agent: alg.ActorCritic, sdgat: SdgatConfig):
    arrays = {f"actor/{k}": v for k, v in agent.actor.state_arrays().items()}
    arrays.update({f"critic/{k}": v for k, v in agent.critic.state_arrays().items()})
    np.savez(path, schema=CHECKPOINT_SCHEMA, config=json.dumps(asdict(sdgat)), **arrays)


def load_checkpoint(path, agent: alg.ActorCritic):
    blob = np.load(path, allow_pickle=False)
    if str(blob["schema"]) != CHECKPOINT_SCHEMA:
        raise ValueError(f"unknown checkpoint schema {blob['schema']!r}")
    agent.actor.load_state_arrays(
        {k.split("/", 1)[1]: blob[k] for k in blob.files if k.startswith("actor/")})
    agent.critic.load_state_arrays(
        {k.split("/", 1)[1]: blob[k] for k in blob.files if k.startswith("critic/")})
    return json.loads(str(blob["config"]))


# -- pruning ---------------------------------------------------------------


def prune_threshold(graph: np.ndarray, dataset: datagen.Dataset,
                    regressor: str = "linear", threshold: float = 0.3) -> np.ndarray:
    """Drop edges whose refit coefficient magnitude falls below the threshold.

    For the quadratic regressor an edge survives on the largest magnitude
    across every first- and second-order term involving that parent.  The
    GP regressor has no coefficients to threshold.
    """
    if regressor == "gp":
        raise ValueError("threshold pruning needs a coefficient-based regressor")
    graph = np.asarray(graph, dtype=np.int64)
    x = dataset.X
    n, m = x.shape
    pruned = graph.copy()
    for child in range(n):
        parents = np.nonzero(graph[:, child])[0]
        if parents.size == 0:
            continue
        if regressor == "linear":
            design = np.concatenate([x[parents].T, np.ones((m, 1))], axis=1)
            coef, *_ = np.linalg.lstsq(design, x[child], rcond=None)
            magnitudes = np.abs(coef[:len(parents)])
        else:
            feats, spans = _quadratic_feature_spans(x[parents])
            design = np.concatenate([feats.T, np.ones((m, 1))], axis=1)
            coef, *_ = np.linalg.lstsq(design, x[child], rcond=None)
            magnitudes = np.array([np.abs(coef[span]).max() for span in spans])
        for parent, magnitude in zip(parents, magnitudes):
            if magnitude < threshold:
                pruned[parent, child] = 0
    return pruned


def _quadratic_feature_spans(inputs: np.ndarray):
    """Quadratic design plus, per parent, the feature indices involving it."""
    k = inputs.shape[0]
    blocks = [inputs]
    involving = [[i] for i in range(k)]
    idx = k
    for a in range(k):
        for b in range(a, k):
            blocks.append((inputs[a] * inputs[b])[None, :])
            involving[a].append(idx)
            if b != a:
                involving[b].append(idx)
            idx += 1
    return np.concatenate(blocks, axis=0), involving


def prune_greedy(graph: np.ndarray, dataset: datagen.Dataset,
                 config: scoring.ScoreConfig | None = None, tolerance: float = 0.0,
                 scorer: scoring.Scorer | None = None) -> np.ndarray:
    """Delete edges one at a time while the raw score does not worsen
    beyond the tolerance; repeat passes to a fixed point.

    Deletions preserve acyclicity, so a DAG input yields a DAG output.
    """
    if scorer is None:
        scorer = scoring.Scorer(dataset, config)
    current = np.asarray(graph, dtype=np.int64).copy()
    current_bic = scorer.bic(current)
    changed = True
    while changed:
        changed = False
        for i, j in zip(*np.nonzero(current)):
            current[i, j] = 0
            trial_bic = scorer.bic(current)
            if trial_bic <= current_bic + tolerance:
                current_bic = trial_bic
                changed = True
            else:
                current[i, j] = 1
    return current


# -- periodic evaluation ------------------------------------------------------


def evaluate_periodic(record: RunRecord, truth: np.ndarray,
                      dataset: datagen.Dataset | None = None,
                      scorer: scoring.Scorer | None = None,
                      prune: bool = False, tolerance: float = 0.0) -> list[dict]:
    """Metrics of the recorded best DAG at each checkpoint of a run.

    With ``prune`` set, each checkpoint graph is greedily pruned first
    (requires the dataset or a scorer).
    """
    truth = np.asarray(truth, dtype=np.int64)
    n = truth.shape[0]
    series = []
    for iteration, fp in record.best_history:
        row = {"iteration": iteration}
        if fp is None:
            row.update({"shd": None, "tpr": None, "fdr": None,
                        "correct_edges": None, "predicted_edges": None})
        else:
            estimate = scoring.unfingerprint(fp, n)
            if prune:
                estimate = prune_greedy(estimate, dataset, scorer=scorer, tolerance=tolerance)
            row.update(graphs.graph_metrics(estimate, truth).to_dict())
        series.append(row)
    return series


def evaluation_to_csv(series: list[dict], path):
    columns = ["iteration", "shd", "tpr", "fdr", "correct_edges", "predicted_edges"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in series:
            fh.write(",".join("" if row[c] is None else str(row[c]) for c in columns) + "\n")
