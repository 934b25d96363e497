"""Causal DAG discovery by policy-gradient search.

A numpy library that searches the space of directed acyclic graphs with a
policy-gradient agent: a scaled dot-product graph attention encoder
proposes edge probabilities, graphs are scored by regression-based BIC
with acyclicity penalties, and the policy is optimized by REINFORCE,
prioritized-replay REINFORCE, trust-region-navigated clipping, or a PPO
comparison arm.
"""

from . import autodiff, graphs, datagen, scoring, actor, critic, algorithms, pipeline

from .autodiff import Tensor, Adam, Tape, no_grad, use_tape
from .graphs import GraphMetrics, acyclicity_penalty, graph_metrics, is_dag
from .datagen import Dataset, GenConfig, draw_state_batch, generate, load_external
from .scoring import ScoreCache, ScoreConfig, ScoredGraph, Scorer
from .actor import GraphActor, SdgatConfig, entropy, sample_action
from .critic import Critic, CriticConfig
from .algorithms import (
    ActorCritic,
    KlBounds,
    MovingAverage,
    OnlineBatch,
    ReplayBuffer,
    Transition,
    TrcConfig,
    baseline_gradient_gap,
    kl_map,
    kl_ratio_bounds,
    ppo_step,
    psr_step,
    reinforce_step,
    rollout,
    trc_clip,
    trc_step,
)
from .pipeline import ProcedureConfig, RunRecord, evaluate_periodic, prune_greedy, prune_threshold, run_procedure

__version__ = "0.1.0"
