"""Two-substage curriculum SFT: positive-only, then 50/50 positive/negative-correction."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

from .csp import CspRecord
from .policy import (
    META_GROUPS,
    DivergenceError,
    PolicyParams,
    backward,
    encode_features,
    forward,
    meta_codes,
    meta_targets,
    scene_only,
    update,
    with_meta,
)
from .scenario import Trajectory

ALPHA_MIN, ALPHA_MAX = 0.1, 10.0
_ALPHA_EPS = 1e-8


@dataclass(frozen=True)
class SftConfig:
    epochs_stage1: int = 15
    epochs_stage2: int = 5
    mix_ratio: float = 0.5
    batch_size: int = 4
    seed: int = 0
    adaptive_alpha: bool = True
    alpha: float = 1.0  # used when adaptive_alpha is off
    lr_pooling: float = 1e-2
    lr_action: float = 2e-2
    lr_meta: float = 1e-2

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("batch size must be positive and epoch counts non-negative")
        if min(self.lr_pooling, self.lr_action, self.lr_meta) <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def learning_rates(self) -> dict:
        return {"pooling": self.lr_pooling, "action": self.lr_action, "meta": self.lr_meta}


# ---------------------------------------------------------------------------
# losses


def _xy(t) -> np.ndarray:
    return t.xy if isinstance(t, Trajectory) else np.asarray(t, dtype=float)


def traj_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared waypoint distance and its gradient w.r.t. ``pred``."""
    p, q = _xy(pred), _xy(target)
    if p.shape != q.shape:
        raise ValueError("trajectory lengths differ")
    diff = p - q
    n = p.shape[-2]
    return float(np.sum(diff**2) / n), 2.0 * diff / n


def text_loss(meta_logits, target) -> tuple[float, np.ndarray]:
    """Summed cross-entropy of the four meta-action softmax groups.

    ``target`` is a pair of DrivingCommands or the four class indices.
    """
    z = np.asarray(meta_logits, dtype=float)
    idx = meta_targets(target) if not isinstance(target, np.ndarray) else target
    loss = 0.0
    g = np.zeros_like(z)
    for grp, k in zip(META_GROUPS, idx):
        zg = z[grp] - np.max(z[grp])
        lse = np.log(np.sum(np.exp(zg)))
        loss += lse - zg[k]
        prob = np.exp(zg - lse)
        prob[k] -= 1.0
        g[grp] = prob
    return float(loss), g


def _batch_text(logits: np.ndarray, targets: np.ndarray):
    loss = 0.0
    g = np.zeros_like(logits)
    for i in range(len(logits)):
        l, gi = text_loss(logits[i], targets[i])
        loss += l
        g[i] = gi
    return loss / len(logits), g / len(logits)


# ---------------------------------------------------------------------------
# samples and steps


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # (S, D), meta slot ignored
    meta_codes: np.ndarray  # teacher-forcing codes for pass B
    meta_targets: np.ndarray  # class indices for the text loss
    target: np.ndarray  # (8, 2)
    neg: bool = False


def make_sample(record: CspRecord, with_analysis: bool | None = None) -> Sample:
    """Supervision for one record; Neg records see their analysis unless disabled."""
    use = record.is_neg if with_analysis is None else with_analysis and record.is_neg
    feats = encode_features(
        record.scene,
        record.analysis if use else None,
        record.tau_neg if use else None,
    )
    meta = record.cot.meta_actions
    return Sample(feats, meta_codes(meta), meta_targets(meta), np.array(record.tau_pos.xy), record.is_neg)


@dataclass(frozen=True)
class LossBreakdown:
    loss_total: float
    loss_text: float
    loss_traj: float
    alpha: float
    grad_norm: float


def batch_gradients(batch: Sequence[Sample], params: PolicyParams):
    """(loss_text, loss_traj, g_text, g_traj) for a batch, with teacher forcing."""
    feats = np.stack([s.features for s in batch])
    xa = scene_only(feats)
    xb = with_meta(feats, np.stack([s.meta_codes for s in batch]))
    wp, logits, cache = forward(params, xa, xb)
    target = np.stack([s.target for s in batch])
    diff = wp - target
    n_b, n_w = diff.shape[0], diff.shape[1]
    loss_traj = float(np.sum(diff**2) / (n_w * n_b))
    d_wp = 2.0 * diff / (n_w * n_b)
    loss_text, d_logits = _batch_text(logits, np.stack([s.meta_targets for s in batch]))
    g_text = backward(params, cache, None, d_logits)
    g_traj = backward(params, cache, d_wp, None)
    return loss_text, loss_traj, g_text, g_traj


def balance_alpha(g_text: PolicyParams, g_traj: PolicyParams) -> float:
    """Scale for the trajectory gradient so both terms act at a similar magnitude."""
    ratio = g_text.norm() / (g_traj.norm() + _ALPHA_EPS)
    return float(np.clip(ratio, ALPHA_MIN, ALPHA_MAX))


def joint_step(batch: Sequence[Sample], params: PolicyParams, config: SftConfig):
    if not batch:
        raise ValueError("empty batch")
    loss_text, loss_traj, g_text, g_traj = batch_gradients(batch, params)
    alpha = balance_alpha(g_text, g_traj) if config.adaptive_alpha else config.alpha
    total = g_text + g_traj.scaled(alpha)
    loss_total = loss_text + alpha * loss_traj
    if not math.isfinite(loss_total):
        raise DivergenceError("non-finite SFT loss")
    new = update(params, total, config.learning_rates)
    return new, LossBreakdown(loss_total, loss_text, loss_traj, alpha, total.norm())


# ---------------------------------------------------------------------------
# schedules


def _cycle(items: list, rng: np.random.Generator):
    """Endless seeded shuffle-and-repeat iterator."""
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def mixed_batches(pos: list, neg: list, n_batches: int, batch_size: int, mix_ratio: float, rng: np.random.Generator):
    """Deterministic interleaving with an exact per-batch Pos count."""
    n_pos = int(round(batch_size * mix_ratio))
    # spread Pos slots evenly across the batch
    pos_slots = {int(math.floor(i * batch_size / n_pos)) for i in range(n_pos)} if n_pos else set()
    pos_it, neg_it = _cycle(pos, rng), _cycle(neg, rng)
    for _ in range(n_batches):
        yield [next(pos_it) if j in pos_slots else next(neg_it) for j in range(batch_size)]


TraceSink = Callable[[dict], None]


def _record(trace: TraceSink | None, step: int, stage: str, lb: LossBreakdown):
    if trace is not None:
        trace({"step": step, "stage": stage, **asdict(lb)})


def train_stage1(
    records: Sequence[CspRecord], params: PolicyParams, config: SftConfig, trace: TraceSink | None = None
) -> PolicyParams:
    """Positive-only substage; Neg records in the input are ignored."""
    samples = [make_sample(r) for r in records if not r.is_neg]
    if not samples:
        raise ValueError("stage 1 needs at least one Pos record")
    rng = np.random.default_rng([config.seed, 1])
    step = 0
    for _ in range(config.epochs_stage1):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            params, lb = joint_step(batch, params, config)
            _record(trace, step, "sft1", lb)
            step += 1
    return params


def train_stage2(
    records: Sequence[CspRecord], params: PolicyParams, config: SftConfig, trace: TraceSink | None = None
) -> PolicyParams:
    """Mixed substage; Neg samples carry their analysis and target tau_pos."""
    pos = [make_sample(r) for r in records if not r.is_neg]
    neg = [make_sample(r) for r in records if r.is_neg]
    if not pos or not neg:
        raise ValueError("stage 2 needs both Pos and Neg records")
    rng = np.random.default_rng([config.seed, 2])
    per_epoch = math.ceil(len(records) / config.batch_size)
    step = 0
    batches = mixed_batches(pos, neg, per_epoch * config.epochs_stage2, config.batch_size, config.mix_ratio, rng)
    for batch in batches:
        params, lb = joint_step(batch, params, config)
        _record(trace, step, "sft2", lb)
        step += 1
    return params
