"""Anchor-based group policy optimisation on Neg records.

Each step samples a group of noisy plans for one scene, optionally refines it
with analysis-conditioned resamples, normalises rewards over the sampled and
refined members only, and applies an advantage-weighted pull toward the
positive anchor plus a margin push away from the negative anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .csp import CspRecord, build_negative_analysis
from .metrics import pdms, score_trajectory
from .policy import (
    DIM,
    DivergenceError,
    PolicyParams,
    backward,
    encode_features,
    forward,
    prepare_inputs,
    to_trajectory,
    update,
)
from .scenario import Scene, Trajectory

ROLE_SAMPLED = "sampled"
ROLE_REFINED = "refined"
ROLE_POS = "anchor_pos"
ROLE_NEG = "anchor_neg"
_SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class GrpoConfig:
    n: int = 6
    k: int = 2
    delta: float = 0.6
    sigma: float = 0.1
    margin: float = 1.0
    eta: float = 1e-6
    c_clip: float = 1.5
    s_goal: float = 3.0
    delta_huber: float = 1.0
    epochs: int = 10
    lr_pooling: float = 3e-3
    lr_action: float = 3e-3
    seed: int = 0
    refine_draws: int = 8
    w_traj: float = 0.5
    w_pref: float = 0.3
    w_goal: float = 0.2
    # ablation toggles: ``anchors=False`` drops the two anchor members from the
    # group and the anchor-relative preference reward; the dual-branch targets
    # stay tau_pos / tau_neg.  ``feedback=False`` disables refinement.
    anchors: bool = True
    feedback: bool = True

    def __post_init__(self):
        positive = (self.n, self.k, self.sigma, self.margin, self.eta, self.c_clip, self.s_goal,
                    self.delta_huber, self.epochs, self.lr_pooling, self.lr_action, self.refine_draws)
        if min(positive) <= 0:
            raise ValueError("GRPO settings must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.n < 2:
            raise ValueError("group needs at least two samples")
        if min(self.w_traj, self.w_pref, self.w_goal) < 0:
            raise ValueError("reward weights must be non-negative")

    @property
    def reward_weights(self) -> tuple[float, float, float]:
        """(traj, pref, goal); without anchors the preference term is dropped and the rest rescaled."""
        if self.anchors:
            return self.w_traj, self.w_pref, self.w_goal
        s = self.w_traj + self.w_goal
        return self.w_traj / s, 0.0, self.w_goal / s

    @property
    def learning_rates(self) -> dict:
        return {"pooling": self.lr_pooling, "action": self.lr_action}


# ---------------------------------------------------------------------------
# rewards


def _xy(t) -> np.ndarray:
    return t.xy if isinstance(t, Trajectory) else np.asarray(t, dtype=float)


def traj_distance(a, b) -> float:
    """L2 norm of the flattened waypoint difference."""
    return float(np.sqrt(np.sum((_xy(a) - _xy(b)) ** 2)))


def reward_pref(tau, tau_pos, tau_neg, config: GrpoConfig) -> float:
    ratio = traj_distance(tau, tau_neg) / (traj_distance(tau_pos, tau_neg) + config.eta)
    return float(np.clip(ratio, 0.0, config.c_clip) / config.c_clip)


def reward_goal(tau, tau_pos, config: GrpoConfig) -> float:
    fde = float(np.hypot(*(_xy(tau)[-1] - _xy(tau_pos)[-1])))
    return math.exp(-fde / config.s_goal)


@dataclass(frozen=True)
class RewardBreakdown:
    r_traj: float
    r_pref: float
    r_goal: float
    total: float

    def to_dict(self) -> dict:
        return {"r_traj": self.r_traj, "r_pref": self.r_pref, "r_goal": self.r_goal, "total": self.total}


def combine_rewards(r_traj: float, r_pref: float, r_goal: float, config: GrpoConfig) -> RewardBreakdown:
    wt, wp, wg = config.reward_weights
    return RewardBreakdown(r_traj, r_pref, r_goal, wt * r_traj + wp * r_pref + wg * r_goal)


@dataclass(frozen=True)
class Anchors:
    tau_pos: Trajectory
    tau_neg: Trajectory
    reference_progress: float

    @classmethod
    def from_record(cls, record: CspRecord) -> "Anchors":
        if not record.is_neg:
            raise ValueError("anchors need a Neg record")
        return cls(record.tau_pos, record.tau_neg, record.reference_progress)


def reward_total(tau: Trajectory, scene: Scene, anchors: Anchors, config: GrpoConfig) -> RewardBreakdown:
    r_traj = pdms(score_trajectory(scene, tau, anchors.reference_progress))
    return combine_rewards(
        r_traj,
        reward_pref(tau, anchors.tau_pos, anchors.tau_neg, config),
        reward_goal(tau, anchors.tau_pos, config),
        config,
    )


# ---------------------------------------------------------------------------
# groups


@dataclass
class Member:
    role: str
    trajectory: Trajectory
    reward: RewardBreakdown
    # policy inputs that reproduce the trajectory; None for anchors
    xa: np.ndarray | None = None
    xb: np.ndarray | None = None
    noise: np.ndarray | None = None

    @property
    def trainable(self) -> bool:
        return self.xb is not None


@dataclass
class TrajectoryGroup:
    sampled: list[Member]
    refined: list[Member] = field(default_factory=list)
    anchors: list[Member] = field(default_factory=list)
    triggered: bool = False

    @property
    def members(self) -> list[Member]:
        return self.sampled + self.refined + self.anchors

    @property
    def sample_rewards(self) -> np.ndarray:
        return np.array([m.reward.total for m in self.sampled + self.refined])

    @property
    def anchor_rewards(self) -> np.ndarray:
        return np.array([m.reward.total for m in self.anchors])


def _draw(features: np.ndarray, params: PolicyParams, n: int, sigma: float, rng: np.random.Generator):
    """``n`` noisy plans from one (S, D) encoding; returns (xa, xb, noise, waypoints)."""
    xa, xb = prepare_inputs(params, features[None])
    xa = np.repeat(xa, n, axis=0)
    xb = np.repeat(xb, n, axis=0)
    noise = rng.normal(0.0, sigma, (n, DIM)) if sigma > 0 else np.zeros((n, DIM))
    wp, _, _ = forward(params, xa, xb, noise)
    return xa, xb, noise, wp


def _score(role, scene, anchors, config, xa, xb, noise, wp) -> list[Member]:
    out = []
    for i in range(len(wp)):
        traj = to_trajectory(wp[i])
        out.append(Member(role, traj, reward_total(traj, scene, anchors, config), xa[i], xb[i], noise[i]))
    return out


def sample_group(
    scene: Scene,
    params: PolicyParams,
    config: GrpoConfig,
    rng: np.random.Generator,
    anchors: Anchors,
    features: np.ndarray | None = None,
) -> list[Member]:
    """N independent perturbations of the pooled scene feature, scored."""
    feats = encode_features(scene) if features is None else features
    return _score(ROLE_SAMPLED, scene, anchors, config, *_draw(feats, params, config.n, config.sigma, rng))


def _draw_refined(features, params, config, rng):
    return _draw(features, params, config.refine_draws, config.sigma, rng)


def feedback_refine(
    group: TrajectoryGroup,
    scene: Scene,
    params: PolicyParams,
    config: GrpoConfig,
    rng: np.random.Generator,
    anchors: Anchors,
) -> list[Member]:
    """Analysis-conditioned resamples that beat the group's best reward (at most K)."""
    rewards = np.array([m.reward.total for m in group.sampled])
    best = float(rewards.max())
    if best >= config.delta:
        return []
    worst = group.sampled[int(np.argmin(rewards))].trajectory
    analysis = build_negative_analysis(worst, anchors.tau_pos, (), scene.ego.position, scene.ego.heading)
    feats = encode_features(scene, analysis, worst)
    draws = _score(ROLE_REFINED, scene, anchors, config, *_draw_refined(feats, params, config, rng))
    return [m for m in draws if m.reward.total > best][: config.k]


def normalize_advantages(sample_rewards, anchor_rewards=()) -> tuple[np.ndarray, np.ndarray]:
    """Advantages from sampled/refined statistics only; anchors reuse the same mean and std."""
    r = np.asarray(sample_rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two sampled rewards")
    # shifted mean: exact when all rewards are equal, so the guard yields zeros
    mu = r[0] + np.mean(r - r[0])
    sd = max(float(np.sqrt(np.mean((r - mu) ** 2))), _SIGMA_FLOOR)
    return (r - mu) / sd, (np.asarray(anchor_rewards, dtype=float) - mu) / sd


def huber(u: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber value and derivative (continuous at the switch)."""
    a = np.abs(u)
    quad = a <= delta
    val = np.where(quad, 0.5 * u * u, delta * (a - 0.5 * delta))
    der = np.where(quad, u, delta * np.sign(u))
    return val, der


def dual_branch_terms(trajs, advantages, tau_pos, tau_neg, config: GrpoConfig):
    """Per-member terms and their gradients w.r.t. each member's waypoints.

    Positive (Â ≥ 0): Â · mean over waypoints of the coordinate-summed Huber
    distance to ``tau_pos``. Negative: |Â| · max(0, m − d(τ, τ_neg)). The hinge
    derivative is zero at d = m and at d = 0.
    """
    x = np.asarray(trajs, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    pos, neg = _xy(tau_pos), _xy(tau_neg)
    n_wp = x.shape[1]
    terms = np.zeros(len(x))
    grads = np.zeros_like(x)
    for i in range(len(x)):
        if adv[i] >= 0:
            val, der = huber(x[i] - pos, config.delta_huber)
            terms[i] = adv[i] * val.sum() / n_wp
            grads[i] = adv[i] * der / n_wp
        else:
            diff = x[i] - neg
            d = float(np.sqrt(np.sum(diff**2)))
            gap = config.margin - d
            if gap > 0:
                terms[i] = -adv[i] * gap
                if d > 0:
                    grads[i] = adv[i] * diff / d  # |Â| · (−∂d/∂τ)
    return terms, grads


def dual_branch_loss(group: TrajectoryGroup, advantages: np.ndarray, config: GrpoConfig, tau_pos, tau_neg):
    """Mean term over all members; returns (loss, gradients w.r.t. trainable members' waypoints)."""
    members = group.members
    trajs = np.stack([m.trajectory.xy for m in members])
    terms, grads = dual_branch_terms(trajs, advantages, tau_pos, tau_neg, config)
    size = len(members)
    trainable = [i for i, m in enumerate(members) if m.trainable]
    return float(terms.sum() / size), grads[trainable] / size


def group_gradient(params: PolicyParams, group: TrajectoryGroup, advantages, config: GrpoConfig, tau_pos, tau_neg):
    loss, d_wp = dual_branch_loss(group, advantages, config, tau_pos, tau_neg)
    live = [m for m in group.members if m.trainable]
    xa = np.stack([m.xa for m in live])
    xb = np.stack([m.xb for m in live])
    noise = np.stack([m.noise for m in live])
    _, _, cache = forward(params, xa, xb, noise)
    return loss, backward(params, cache, d_wp, None)


# ---------------------------------------------------------------------------
# training


TraceSink = Callable[[dict], None]


def grpo_step(
    record: CspRecord,
    params: PolicyParams,
    config: GrpoConfig,
    rng: np.random.Generator,
    features: np.ndarray | None = None,
    anchor_members: list[Member] | None = None,
):
    """One group update for one Neg record; returns (params, group, advantages, loss, grads)."""
    anchors = Anchors.from_record(record)
    scene = record.scene
    group = TrajectoryGroup(sample_group(scene, params, config, rng, anchors, features))
    if config.feedback:
        group.triggered = max(m.reward.total for m in group.sampled) < config.delta
        group.refined = feedback_refine(group, scene, params, config, rng, anchors)
    if config.anchors:
        group.anchors = anchor_members if anchor_members is not None else anchor_group(record, config)
    adv_s, adv_a = normalize_advantages(group.sample_rewards, group.anchor_rewards)
    advantages = np.concatenate([adv_s, adv_a])
    loss, grads = group_gradient(params, group, advantages, config, anchors.tau_pos, anchors.tau_neg)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite GRPO loss")
    return update(params, grads, config.learning_rates, groups=("pooling", "action")), group, advantages, loss, grads


def anchor_group(record: CspRecord, config: GrpoConfig) -> list[Member]:
    anchors = Anchors.from_record(record)
    return [
        Member(ROLE_POS, anchors.tau_pos, reward_total(anchors.tau_pos, record.scene, anchors, config)),
        Member(ROLE_NEG, anchors.tau_neg, reward_total(anchors.tau_neg, record.scene, anchors, config)),
    ]


def train_grpo(
    records: Sequence[CspRecord], params: PolicyParams, config: GrpoConfig, trace: TraceSink | None = None
) -> PolicyParams:
    """Epochs over the Neg records in seeded order; meta head and encoder stay fixed."""
    neg = [r for r in records if r.is_neg]
    if not neg:
        raise ValueError("GRPO needs Neg records")
    feats = [encode_features(r.scene) for r in neg]
    anchor_cache = [anchor_group(r, config) if config.anchors else None for r in neg]
    order_rng = np.random.default_rng([config.seed, 3])
    noise_rng = np.random.default_rng([config.seed, 4])
    step = 0
    for epoch in range(config.epochs):
        for i in order_rng.permutation(len(neg)):
            params, group, adv, loss, grads = grpo_step(neg[i], params, config, noise_rng, feats[i], anchor_cache[i])
            if trace is not None:
                trace(_trace_row(step, epoch, neg[i], group, adv, loss, grads))
            step += 1
    return params


def _trace_row(step, epoch, record, group, adv, loss, grads) -> dict:
    sampled_max = max(m.reward.total for m in group.sampled)
    return {
        "step": step,
        "stage": "grpo",
        "epoch": epoch,
        "scene_id": record.scene.scene_id,
        "members": [
            {"role": m.role, "reward": m.reward.total, "advantage": float(a)}
            for m, a in zip(group.members, adv)
        ],
        "mean_sampled_reward": float(np.mean([m.reward.total for m in group.sampled])),
        "sampled_max": sampled_max,
        "triggered": group.triggered,
        "refined_count": len(group.refined),
        "loss": loss,
        "grad_norm_pooling": grads.norm(("pool_w", "pool_b")),
        "grad_norm_action": grads.norm(("W1", "b1", "W2", "b2", "W3", "b3")),
    }
