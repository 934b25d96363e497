"""Policy-optimization steps and their supporting machinery.

Four single-step trainers share one surrogate structure:

* ``reinforce_step`` -- score-function gradient with a moving-average
  baseline and a learned state-value baseline.
* ``psr_step`` -- the same surrogate applied to transitions drawn from a
  rank-prioritized replay buffer (priority = advantage magnitude).
* ``trc_step`` -- importance-weighted surrogate over per-edge likelihood
  ratios, where a ratio is clipped only when its per-edge KL divergence
  from the recorded old policy leaves the trust region.
* ``ppo_step`` -- comparison arm: every ratio is clipped to the constant
  interval via the pessimistic min form, regardless of KL.

Rewards, baselines and recorded old policies are constants inside every
loss; only the current policy and critic carry gradient.  One step is an
exclusive critical section over (networks, moving average, buffer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .actor import GraphActor, SdgatConfig, entropy_term, sample_action_batch
from .critic import Critic, CriticConfig, critic_loss


@dataclass
class TrcConfig:
    clip_radius: float = 0.1     # half-width of the constant clip interval
    kl_threshold: float = 0.035  # per-edge trust-region bound
    entropy_weight: float = 0.001

    def validate(self):
        if not 0.0 < self.clip_radius < 1.0:
            raise ValueError("clip_radius must lie in (0, 1)")
        if self.kl_threshold <= 0:
            raise ValueError("kl_threshold must be positive")


class MovingAverage:
    """Exponentially smoothed batch reward, subtracted as a baseline.

    The first update seeds the average with the batch mean; afterwards
    value' = (1 - rate) * batch_mean + rate * value.
    """

    def __init__(self, rate: float = 0.99, value: float | None = None):
        self.rate = rate
        self.value = value

    def update(self, batch_mean: float) -> float:
        batch_mean = float(batch_mean)
        if self.value is None:
            self.value = batch_mean
        else:
            self.value = (1.0 - self.rate) * batch_mean + self.rate * self.value
        return self.value


@dataclass
class Transition:
    """One replay record: a state, the sampled graph, its reward, the
    recorded per-edge probabilities of the sampled values, and the
    advantage estimate at storage time."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    old_probs: np.ndarray | None
    advantage: float
    index: int = -1
    fingerprint: bytes | None = None


class ReplayBuffer:
    """Ring buffer with rank-based prioritized sampling.

    Priorities are ranks of |advantage| (rank 1 = largest magnitude, ties
    broken oldest-first); the replay distribution is rank^-beta normalized
    over current contents, which is monotone and strictly positive.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[Transition] = []
        self._counter = 0

    def __len__(self):
        return len(self.items)

    def add(self, transition: Transition):
        transition.index = self._counter
        self._counter += 1
        if len(self.items) == self.capacity:
            self.items.pop(0)  # oldest-first eviction
        self.items.append(transition)

    def priority_distribution(self, beta: float) -> np.ndarray:
        if not self.items:
            raise ValueError("priority distribution of an empty buffer")
        order = sorted(range(len(self.items)),
                       key=lambda i: (-abs(self.items[i].advantage), self.items[i].index))
        ranks = np.empty(len(self.items))
        ranks[order] = np.arange(1, len(self.items) + 1)
        weights = ranks ** (-float(beta))
        return weights / weights.sum()

    def sample(self, count: int, rng: np.random.Generator, beta: float) -> list[Transition]:
        p = self.priority_distribution(beta)
        picks = rng.choice(len(self.items), size=count, replace=True, p=p)
        return [self.items[i] for i in picks]

    def refresh_rewards(self, reward_of):
        """Recompute stored rewards (e.g. after penalty-weight changes)."""
        for t in self.items:
            if t.fingerprint is not None:
                t.reward = float(reward_of(t.fingerprint))


@dataclass
class ActorCritic:
    """Networks plus their optimizers; updated only inside a step."""

    actor: GraphActor
    critic: Critic
    actor_opt: ad.Adam
    critic_opt: ad.Adam

    @classmethod
    def build(cls, feature_dim: int, rng: np.random.Generator,
              sdgat: SdgatConfig | None = None, critic_cfg: CriticConfig | None = None,
              actor_lr: float = 1e-3, critic_lr: float = 1e-3) -> "ActorCritic":
        sdgat = sdgat or SdgatConfig()
        critic_cfg = critic_cfg or CriticConfig()
        actor = GraphActor(sdgat, feature_dim, rng)
        critic = Critic(critic_cfg, sdgat.out_dim, rng)
        return cls(actor, critic,
                   ad.Adam(actor.params, lr=actor_lr),
                   ad.Adam(critic.params, lr=critic_lr))


@dataclass
class OnlineBatch:
    """One batch of fresh policy rollouts; rewards are filled in by the caller."""

    states: np.ndarray       # (batch, n, m)
    actions: np.ndarray      # (batch, n, n)
    log_probs: np.ndarray    # (batch,)
    old_probs: np.ndarray    # (batch, n, n) probability of each sampled value
    values: np.ndarray       # (batch,)
    rewards: np.ndarray | None = None
    fingerprints: list = field(default_factory=list)

    def __len__(self):
        return self.states.shape[0]


def rollout(agent: ActorCritic, states: np.ndarray, rng: np.random.Generator) -> OnlineBatch:
    """Sample graphs for a stack of states without recording gradients."""
    with ad.no_grad():
        enc = agent.actor.encode(states)
        probs = agent.actor.decode(enc)
        values = agent.critic.value(enc)
    actions, log_probs, chosen = sample_action_batch(probs.data, rng)
    return OnlineBatch(states=np.asarray(states, dtype=np.float64), actions=actions,
                       log_probs=log_probs, old_probs=chosen, values=np.atleast_1d(values.data))


@dataclass
class StepResult:
    actor_loss: float
    critic_loss: float
    mean_reward: float
    baseline: float
    diagnostics: dict = field(default_factory=dict)


def _chosen_prob_tensor(probs: Tensor, actions: np.ndarray) -> Tensor:
    """Per-edge probability of the realized value under the current policy.

    The decoder's zero diagonal makes diagonal entries exactly 1, so they
    drop out of log-prob sums and ratio products.
    """
    actions = np.asarray(actions, dtype=np.float64)
    return probs * actions + (1.0 - probs) * (1.0 - actions)


def _mean_log_prob(probs: Tensor, actions: np.ndarray) -> Tensor:
    n = probs.shape[-1]
    chosen = _chosen_prob_tensor(probs, actions)
    return ad.log(chosen).sum(axis=(-2, -1)) * (1.0 / (n * n))


def _assert_finite_losses(actor_loss: Tensor, value_loss: Tensor):
    if not (np.isfinite(actor_loss.data).all() and np.isfinite(value_loss.data).all()):
        raise ad.NumericError("non-finite training loss; step aborted")


def reinforce_step(batch: OnlineBatch, agent: ActorCritic, moving_avg: MovingAverage,
                   entropy_weight: float = 0.001) -> StepResult:
    """One baseline-subtracted score-function update on a fresh batch."""
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    moving_avg.update(rewards.mean())
    with ad.use_tape(ad.Tape()):
        enc = agent.actor.encode(batch.states)
        probs = agent.actor.decode(enc)
        values = agent.critic.value(enc.detach())
        advantages = rewards - moving_avg.value - values.data
        mean_lp = _mean_log_prob(probs, batch.actions)
        exploration = entropy_term(probs).mean()
        actor_loss = -((Tensor(advantages) * mean_lp).mean() + entropy_weight * exploration)
        value_loss = critic_loss(values, rewards, moving_avg.value)
        _assert_finite_losses(actor_loss, value_loss)
        ad.backward(actor_loss + value_loss)
        agent.actor_opt.step()
        agent.critic_opt.step()
    return StepResult(actor_loss.item(), value_loss.item(), float(rewards.mean()),
                      moving_avg.value)


def _store_online(batch: OnlineBatch, buffer: ReplayBuffer, moving_avg: MovingAverage):
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    if moving_avg.value is None:
        moving_avg.value = float(rewards.mean())
    advantages = rewards - moving_avg.value - batch.values
    fps = batch.fingerprints or [None] * len(batch)
    for b in range(len(batch)):
        buffer.add(Transition(state=batch.states[b], action=batch.actions[b],
                              reward=float(rewards[b]), old_probs=batch.old_probs[b],
                              advantage=float(advantages[b]), fingerprint=fps[b]))


def _stack_sampled(sampled: list[Transition]):
    states = np.stack([t.state for t in sampled])
    actions = np.stack([t.action for t in sampled])
    rewards = np.array([t.reward for t in sampled])
    old = np.stack([t.old_probs for t in sampled]) if sampled[0].old_probs is not None else None
    return states, actions, rewards, old


def psr_step(batch: OnlineBatch, agent: ActorCritic, buffer: ReplayBuffer,
             moving_avg: MovingAverage, entropy_weight: float = 0.001,
             beta: float = 0.6, rng: np.random.Generator | None = None) -> StepResult:
    """Replay-guided score-function update.

    The fresh batch is stored with its advantage (computed against the
    pre-update baseline); the gradient batch is drawn from the buffer by
    rank priority, with advantages recomputed under the refreshed moving
    average and the current critic.
    """
    rng = rng if rng is not None else np.random.default_rng()
    _store_online(batch, buffer, moving_avg)
    sampled = buffer.sample(len(batch), rng, beta)
    states, actions, rewards, _ = _stack_sampled(sampled)
    moving_avg.update(rewards.mean())
    with ad.use_tape(ad.Tape()):
        enc = agent.actor.encode(states)
        probs = agent.actor.decode(enc)
        values = agent.critic.value(enc.detach())
        advantages = rewards - moving_avg.value - values.data
        mean_lp = _mean_log_prob(probs, actions)
        exploration = entropy_term(probs).mean()
        actor_loss = -((Tensor(advantages) * mean_lp).mean() + entropy_weight * exploration)
        value_loss = critic_loss(values, rewards, moving_avg.value)
        _assert_finite_losses(actor_loss, value_loss)
        ad.backward(actor_loss + value_loss)
        agent.actor_opt.step()
        agent.critic_opt.step()
    return StepResult(actor_loss.item(), value_loss.item(), float(rewards.mean()),
                      moving_avg.value, {"buffer_size": len(buffer)})


# -- trust-region machinery ---------------------------------------------------


def kl_map(old_probs: np.ndarray, new_probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-edge Bernoulli KL divergence between recorded and current policies.

    ``old_probs`` holds the recorded probability of each sampled value;
    ``new_probs`` the current edge probabilities.  The divergence is
    computed between the two Bernoullis at each off-diagonal entry (it is
    invariant to which outcome the probabilities refer to); the diagonal
    is zero.
    """
    old_probs = np.asarray(old_probs, dtype=np.float64)
    new_probs = np.asarray(new_probs, dtype=np.float64)
    actions = np.asarray(actions)
    n = new_probs.shape[-1]
    off = ~np.eye(n, dtype=bool)
    new_chosen = np.where(actions == 1, new_probs, 1.0 - new_probs)
    b = old_probs[..., off]
    p = new_chosen[..., off]
    out = np.zeros(np.broadcast(old_probs, new_chosen).shape)
    out[..., off] = b * np.log(b / p) + (1.0 - b) * np.log((1.0 - b) / (1.0 - p))
    return out


def trc_clip(ratio_map, kl_values: np.ndarray, clip_radius: float, kl_threshold: float):
    """Clip likelihood ratios only where the KL divergence exits the trust region.

    Returns the navigated ratio map (same type as the input) and a boolean
    mask of entries whose value was actually replaced by a clipped one.
    Gradient does not flow through replaced values.
    """
    lo, hi = 1.0 - clip_radius, 1.0 + clip_radius
    outside_region = np.asarray(kl_values) >= kl_threshold
    if isinstance(ratio_map, Tensor):
        raw = ratio_map.data
        clipped = ad.clip(ratio_map, lo, hi)
        region = outside_region.astype(np.float64)
        navigated = clipped * region + ratio_map * (1.0 - region)
    else:
        raw = np.asarray(ratio_map, dtype=np.float64)
        navigated = np.where(outside_region, np.clip(raw, lo, hi), raw)
    changed = outside_region & ((raw < lo) | (raw > hi))
    return navigated, changed


def _ratio_surrogate(probs: Tensor, actions: np.ndarray, old_probs: np.ndarray):
    """Current/old chosen-probability ratios as a tensor plus raw values."""
    chosen = _chosen_prob_tensor(probs, actions)
    inverse_old = 1.0 / np.asarray(old_probs, dtype=np.float64)
    ratio = chosen * inverse_old
    return ratio


def _product_over_edges(ratio_like: Tensor) -> Tensor:
    # product of ~n^2 per-edge factors, taken in log space for headroom
    return ad.exp(ad.log(ratio_like).sum(axis=(-2, -1)))


def trc_step(batch: OnlineBatch, agent: ActorCritic, buffer: ReplayBuffer,
             moving_avg: MovingAverage, cfg: TrcConfig | None = None,
             beta: float = 0.6, rng: np.random.Generator | None = None) -> StepResult:
    """Trust-region-navigated clipping update on prioritized replays.

    The surrogate weights the advantage by the product of per-edge
    likelihood ratios; each ratio is clipped to [1 - radius, 1 + radius]
    only when its per-edge KL divergence meets the threshold.
    """
    cfg = cfg or TrcConfig()
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng()
    _store_online(batch, buffer, moving_avg)
    sampled = buffer.sample(len(batch), rng, beta)
    states, actions, rewards, old_probs = _stack_sampled(sampled)
    if old_probs is None:
        raise ValueError("trc_step needs transitions with recorded old policies")
    moving_avg.update(rewards.mean())
    with ad.use_tape(ad.Tape()):
        enc = agent.actor.encode(states)
        probs = agent.actor.decode(enc)
        values = agent.critic.value(enc.detach())
        advantages = rewards - moving_avg.value - values.data
        ratio = _ratio_surrogate(probs, actions, old_probs)
        kl_values = kl_map(old_probs, probs.data, actions)
        navigated, clipped_mask = trc_clip(ratio, kl_values, cfg.clip_radius, cfg.kl_threshold)
        weight = _product_over_edges(navigated)
        exploration = entropy_term(probs).mean()
        actor_loss = -((Tensor(advantages) * weight).mean()
                       + cfg.entropy_weight * exploration)
        value_loss = critic_loss(values, rewards, moving_avg.value)
        _assert_finite_losses(actor_loss, value_loss)
        ad.backward(actor_loss + value_loss)
        agent.actor_opt.step()
        agent.critic_opt.step()
    outside_interval = np.abs(ratio.data - 1.0) > cfg.clip_radius
    n = actions.shape[-1]
    cells = len(sampled) * n * (n - 1)
    return StepResult(actor_loss.item(), value_loss.item(), float(rewards.mean()),
                      moving_avg.value, {
                          "buffer_size": len(buffer),
                          "clip_fraction": float(clipped_mask.sum()) / cells,
                          "interval_exceeded_fraction": float(outside_interval.sum()) / cells,
                          "clip_counts": clipped_mask.sum(axis=0),
                          "interval_exceeded_counts": outside_interval.sum(axis=0),
                          "kl_mean": float(kl_values.mean()),
                          "batch": len(sampled),
                      })


def ppo_step(batch: OnlineBatch, agent: ActorCritic, buffer: ReplayBuffer,
             moving_avg: MovingAverage, cfg: TrcConfig | None = None,
             beta: float = 0.6, rng: np.random.Generator | None = None) -> StepResult:
    """Comparison arm: constant-interval pessimistic clipping of every ratio.

    Per edge, the pessimistic form min(ratio * adv, clip(ratio) * adv)
    keeps the raw ratio when that is the worse (lower) choice; the clip
    diagnostic counts entries whose ratio leaves the constant interval.
    """
    cfg = cfg or TrcConfig()
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng()
    _store_online(batch, buffer, moving_avg)
    sampled = buffer.sample(len(batch), rng, beta)
    states, actions, rewards, old_probs = _stack_sampled(sampled)
    if old_probs is None:
        raise ValueError("ppo_step needs transitions with recorded old policies")
    moving_avg.update(rewards.mean())
    lo, hi = 1.0 - cfg.clip_radius, 1.0 + cfg.clip_radius
    with ad.use_tape(ad.Tape()):
        enc = agent.actor.encode(states)
        probs = agent.actor.decode(enc)
        values = agent.critic.value(enc.detach())
        advantages = rewards - moving_avg.value - values.data
        ratio = _ratio_surrogate(probs, actions, old_probs)
        raw = ratio.data
        positive = (advantages >= 0.0)[:, None, None]
        use_clip = np.where(positive, raw > hi, raw < lo).astype(np.float64)
        pessimistic = ad.clip(ratio, lo, hi) * use_clip + ratio * (1.0 - use_clip)
        weight = _product_over_edges(pessimistic)
        exploration = entropy_term(probs).mean()
        actor_loss = -((Tensor(advantages) * weight).mean()
                       + cfg.entropy_weight * exploration)
        value_loss = critic_loss(values, rewards, moving_avg.value)
        _assert_finite_losses(actor_loss, value_loss)
        ad.backward(actor_loss + value_loss)
        agent.actor_opt.step()
        agent.critic_opt.step()
    outside_interval = np.abs(raw - 1.0) > cfg.clip_radius
    n = actions.shape[-1]
    cells = len(sampled) * n * (n - 1)
    return StepResult(actor_loss.item(), value_loss.item(), float(rewards.mean()),
                      moving_avg.value, {
                          "buffer_size": len(buffer),
                          "clip_fraction": float(outside_interval.sum()) / cells,
                          "clip_counts": outside_interval.sum(axis=0),
                          "batch": len(sampled),
                      })


# -- trust-region diagnostics --------------------------------------------------


@dataclass
class KlBounds:
    ratio_low: float
    ratio_high: float
    saturated: bool = False


def _bernoulli_kl(b: float, p: float) -> float:
    return b * math.log(b / p) + (1.0 - b) * math.log((1.0 - b) / (1.0 - p))


def _bisect_kl_root(b: float, delta: float, lo: float, hi: float, decreasing: bool) -> float:
    # KL(b, p) is monotone in p on either side of b; find KL == delta
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        value = _bernoulli_kl(b, mid)
        too_large = value > delta
        if decreasing:  # p below b: KL falls as p rises
            if too_large:
                lo = mid
            else:
                hi = mid
        else:           # p above b: KL rises with p
            if too_large:
                hi = mid
            else:
                lo = mid
    return 0.5 * (lo + hi)


def kl_ratio_bounds(b: float, delta: float) -> KlBounds:
    """The likelihood-ratio interval a per-edge trust region admits.

    Solves KL(b, p) = delta for the roots below and above ``b`` by
    bisection and returns (p_low / b, p_high / b).  If a side cannot reach
    ``delta`` within floating-point range the open-interval limit is
    returned with ``saturated`` set.
    """
    if not 0.0 < b < 1.0:
        raise ValueError("b must lie strictly inside (0, 1)")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    p_min, p_max = 1e-300, 1.0 - 1e-16
    saturated = False
    if _bernoulli_kl(b, p_min) < delta:
        low = 0.0
        saturated = True
    else:
        low = _bisect_kl_root(b, delta, p_min, b, decreasing=True) / b
    if _bernoulli_kl(b, p_max) < delta:
        high = 1.0 / b
        saturated = True
    else:
        high = _bisect_kl_root(b, delta, b, p_max, decreasing=False) / b
    return KlBounds(ratio_low=low, ratio_high=high, saturated=saturated)


def baseline_gradient_gap(edge_probs: np.ndarray, reward_fn, baseline: float,
                          value: float) -> float:
    """Exact expected-gradient deviation caused by baseline subtraction.

    For the two-node policy (enumerable four-action space) the expected
    score-function gradient is computed analytically with and without the
    (baseline + value) shift; the maximum componentwise difference is
    returned, and is zero in exact arithmetic.
    """
    edge_probs = np.asarray(edge_probs, dtype=np.float64)
    if edge_probs.shape != (2, 2):
        raise ValueError("the enumerable toy uses a 2x2 policy matrix")
    p = np.array([edge_probs[0, 1], edge_probs[1, 0]])
    grad_plain = np.zeros(2)
    grad_shifted = np.zeros(2)
    for a01 in (0, 1):
        for a10 in (0, 1):
            a = np.array([a01, a10], dtype=np.float64)
            action = np.array([[0, a01], [a10, 0]], dtype=np.int64)
            prob = float(np.prod(np.where(a == 1, p, 1.0 - p)))
            score = (a - p) / (p * (1.0 - p))
            reward = float(reward_fn(action))
            grad_plain += prob * reward * score
            grad_shifted += prob * (reward - baseline - value) * score
    return float(np.max(np.abs(grad_plain - grad_shifted)))
