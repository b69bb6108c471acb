"""Differentiable toy planner: slot encoder, softmax pooling, action and meta heads.

The forward pass runs twice per scene. Pass A pools the scene-only slots
(meta-action context and analysis zeroed) and feeds the meta head. Pass B fills that slot
with meta-action codes (ground truth under teacher forcing, otherwise the
argmax of pass A), adds exploration noise to the pooled vector and decodes a
trajectory with the action head. Both passes share the pooling weights.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .csp import NegativeAnalysisBlock, Axis
from .geometry import rects_overlap
from .scenario import (
    DIRECTION_DECISIONS,
    HORIZON_S,
    FUTURE_TIMES,
    N_FUTURE,
    SPEED_DECISIONS,
    SUPERVISION_HZ,
    DirectionDecision,
    DrivingCommand,
    Scene,
    SpeedDecision,
    Trajectory,
)

N_SLOTS = 8
DIM = 16
HIDDEN1 = 64
HIDDEN2 = 256
OUT = 2 * N_FUTURE
N_SPEED = len(SPEED_DECISIONS)
N_DIR = len(DIRECTION_DECISIONS)
N_META = 2 * (N_SPEED + N_DIR)

EGO_SLOT = 0
AGENT_SLOTS = (1, 2, 3, 4)
ROUTE_SLOT = 5
META_SLOT = 6
ANALYSIS_SLOT = 7

# logit layout: [speed short | direction short | speed long | direction long]
META_GROUPS = (
    slice(0, N_SPEED),
    slice(N_SPEED, N_SPEED + N_DIR),
    slice(N_SPEED + N_DIR, 2 * N_SPEED + N_DIR),
    slice(2 * N_SPEED + N_DIR, N_META),
)

SPEED_CODE = {SpeedDecision.ACCELERATE: 1.0, SpeedDecision.MAINTAIN: 0.0, SpeedDecision.DECELERATE: -1.0}
DIRECTION_CODE = {
    DirectionDecision.KEEP_LANE: 0.0,
    DirectionDecision.TURN_LEFT: 1.0,
    DirectionDecision.TURN_RIGHT: -1.0,
    DirectionDecision.LANE_CHANGE_LEFT: 0.5,
    DirectionDecision.LANE_CHANGE_RIGHT: -0.5,
}

PARAM_SHAPES = {
    "pool_w": (DIM,),
    "pool_b": (1,),
    "W1": (HIDDEN1, DIM),
    "b1": (HIDDEN1,),
    "W2": (HIDDEN2, HIDDEN1),
    "b2": (HIDDEN2,),
    "W3": (OUT, HIDDEN2),
    "b3": (OUT,),
    "M": (N_META, DIM),
    "c": (N_META,),
}
GROUPS = {
    "pooling": ("pool_w", "pool_b"),
    "action": ("W1", "b1", "W2", "b2", "W3", "b3"),
    "meta": ("M", "c"),
}
GROUP_OF = {name: g for g, names in GROUPS.items() for name in names}


class DivergenceError(FloatingPointError):
    """Raised when a forward pass or gradient becomes non-finite."""


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


class PolicyParams:
    """Named float64 arrays with fixed shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        if set(arrays) != set(PARAM_SHAPES):
            raise ShapeMismatch(f"expected parameters {sorted(PARAM_SHAPES)}")
        self.arrays = {}
        for name, shape in PARAM_SHAPES.items():
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {a.shape}")
            self.arrays[name] = a

    @classmethod
    def init(cls, seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        arrays = {name: np.zeros(shape) for name, shape in PARAM_SHAPES.items()}
        for name in ("W1", "W2", "W3", "M"):
            fan_in = PARAM_SHAPES[name][1]
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), PARAM_SHAPES[name])
        return cls(arrays)

    @classmethod
    def zeros(cls) -> "PolicyParams":
        return cls({name: np.zeros(shape) for name, shape in PARAM_SHAPES.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(PARAM_SHAPES)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return all(np.array_equal(self[n], other[n]) for n in PARAM_SHAPES)

    __hash__ = None

    def copy(self) -> "PolicyParams":
        return PolicyParams({n: a.copy() for n, a in self.arrays.items()})

    def map(self, fn) -> "PolicyParams":
        return PolicyParams({n: fn(n, a) for n, a in self.arrays.items()})

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def norm(self, names: Sequence[str] | None = None) -> float:
        names = PARAM_SHAPES if names is None else names
        return float(np.sqrt(sum(float(np.sum(self[n] ** 2)) for n in names)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def __add__(self, other: "PolicyParams") -> "PolicyParams":
        return self.map(lambda n, a: a + other[n])

    def scaled(self, k: float) -> "PolicyParams":
        return self.map(lambda n, a: a * k)


# ---------------------------------------------------------------------------
# checkpoint format: magic, stage tag, shape table, row-major little-endian float64

MAGIC = b"NGPLAN01"
_STAGES = ("init", "sft1", "sft2", "grpo")


def dumps_params(params: PolicyParams, stage: str = "init") -> bytes:
    if stage not in _STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    tag = stage.encode()
    buf.write(struct.pack("<B", len(tag)) + tag)
    buf.write(struct.pack("<I", len(PARAM_SHAPES)))
    for name, shape in PARAM_SHAPES.items():
        key = name.encode()
        buf.write(struct.pack("<B", len(key)) + key)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for name in PARAM_SHAPES:
        buf.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return buf.getvalue()


def loads_params(data: bytes) -> tuple[PolicyParams, str]:
    """Parse a checkpoint; raises ShapeMismatch if it does not fit the policy."""
    view = memoryview(data)
    if bytes(view[: len(MAGIC)]) != MAGIC:
        raise ValueError("not a policy checkpoint")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<B", view, pos)
        stage = bytes(view[pos + 1 : pos + 1 + n]).decode()
        pos += 1 + n
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<B", view, pos)
            name = bytes(view[pos + 1 : pos + 1 + n]).decode()
            pos += 1 + n
            (ndim,) = struct.unpack_from("<B", view, pos)
            shape = struct.unpack_from(f"<{ndim}I", view, pos + 1)
            pos += 1 + 4 * ndim
            table.append((name, tuple(shape)))
    except struct.error as exc:
        raise ValueError("truncated checkpoint header") from exc
    if dict(table) != PARAM_SHAPES or len(table) != len(PARAM_SHAPES):
        raise ShapeMismatch("checkpoint shape table does not match the policy")
    arrays = {}
    for name, shape in table:
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise ValueError("truncated checkpoint body")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return PolicyParams(arrays), stage


def save_params(path, params: PolicyParams, stage: str = "init") -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, dumps_params(params, stage))


def load_params(path) -> tuple[PolicyParams, str]:
    with open(path, "rb") as fh:
        return loads_params(fh.read())


# ---------------------------------------------------------------------------
# encoder


def _agent_state(agent, t0_index: int, dt: float):
    xy = agent.trajectory.xy
    p0 = xy[t0_index]
    v0 = (xy[t0_index] - xy[t0_index - 1]) / dt
    k = int(round(0.5 / dt))
    v_past = (xy[t0_index - k] - xy[t0_index - k - 1]) / dt
    return p0, v0, (v0 - v_past) / 0.5


def _route_preview(scene: Scene, horizons=(2.0, 4.0)) -> np.ndarray:
    """Lateral offset (ego frame) of the centerline point reached at constant speed."""
    line = scene.map.centerline
    ego = scene.ego
    s0, _ = line.project(np.asarray(ego.position)[None])
    pts = line.point_at(s0[0] + ego.speed * np.asarray(horizons)) - np.asarray(ego.position)
    return -np.sin(ego.heading) * pts[:, 0] + np.cos(ego.heading) * pts[:, 1]


def _conflict(rel: np.ndarray, rel_v: np.ndarray, agent_heading: float, size, ego_size) -> float:
    """1 - t/T for the first footprint overlap under constant relative velocity, else 0."""
    t = np.arange(0.0, HORIZON_S + 1e-9, 0.1)
    centers = rel[None] + t[:, None] * rel_v[None]
    hit = rects_overlap(np.zeros(2), 0.0, ego_size, centers, agent_heading, size)
    if not np.any(hit):
        return 0.0
    return float(1.0 - t[int(np.argmax(hit))] / HORIZON_S)


def meta_codes(meta: Sequence[DrivingCommand]) -> np.ndarray:
    short, long = meta
    return np.array([
        SPEED_CODE[short.speed_decision],
        SPEED_CODE[long.speed_decision],
        DIRECTION_CODE[short.direction_decision],
        DIRECTION_CODE[long.direction_decision],
    ])


def _analysis_slot(analysis: NegativeAnalysisBlock, tau_neg: Trajectory | None) -> np.ndarray:
    c = analysis.correction
    out = np.zeros(DIM)
    out[0] = analysis.longitudinal_error / 5.0
    out[1] = analysis.lateral_error / 2.0
    out[2] = 1.0 if analysis.primary_axis is Axis.LONGITUDINAL else -1.0
    out[3] = analysis.mean_correction / 5.0
    out[4] = 1.0
    if tau_neg is not None:
        out[5] = tau_neg.xy[3, 0] / 20.0
        out[6] = tau_neg.xy[-1, 0] / 40.0
        out[7] = tau_neg.xy[-1, 1] / 5.0
    out[8:12] = c[[1, 3, 5, 7], 0] / 5.0
    out[12:15] = c[[1, 3, 7], 1] / 2.0
    out[15] = analysis.max_deviation / 10.0
    return out


def encode_features(
    scene: Scene,
    analysis: NegativeAnalysisBlock | None = None,
    tau_neg: Trajectory | None = None,
    meta: Sequence[DrivingCommand] | None = None,
) -> np.ndarray:
    """Deterministic (N_SLOTS, DIM) scene encoding in the ego frame.

    ``meta`` fills the meta-action context slot; ``analysis`` (optionally with
    the trajectory it was built from) fills the analysis slot. Both stay zero
    when omitted.
    """
    f = np.zeros((N_SLOTS, DIM))
    ego = scene.ego
    hist = scene.ego_history.xy
    dt_h = 1.0 / scene.ego_history.rate_hz
    v_hist = np.hypot(*np.diff(hist, axis=0).T) / dt_h
    accel = (v_hist[-1] - v_hist[0]) / (dt_h * max(len(v_hist) - 1, 1)) if len(v_hist) > 1 else 0.0
    preview = _route_preview(scene)
    f[EGO_SLOT, 0:4] = [1.0, (ego.speed - 10.0) / 2.5, accel / 2.0, preview[1] / 10.0]

    origin = np.asarray(ego.position, dtype=float)
    ch, sh = np.cos(ego.heading), np.sin(ego.heading)
    rot = np.array([[ch, sh], [-sh, ch]])
    ego_v = np.array([ego.speed, 0.0])
    states = []
    for agent in scene.agents:
        tr = agent.trajectory
        i0 = int(np.argmin(np.abs(tr.t)))
        p, v, a = _agent_state(agent, i0, 1.0 / tr.rate_hz)
        rel = rot @ (p - origin)
        rv = rot @ v - ego_v
        risk = _conflict(rel, rv, float(agent.headings()[i0]) - ego.heading, agent.size, ego.size)
        states.append((float(np.hypot(*rel)), agent.id, rel, rv, rot @ a, risk))
    states.sort(key=lambda s: (s[0], s[1]))
    for slot, (_, _, rel, rv, ra, risk) in zip(AGENT_SLOTS, states):
        f[slot, 4:10] = [rel[0] / 30.0, rel[1] / 10.0, rv[0] / 10.0, rv[1] / 10.0, ra[0] / 5.0, risk]

    f[ROUTE_SLOT, 10] = preview[0] / 5.0
    f[ROUTE_SLOT, 11] = DIRECTION_CODE[scene.command.direction_decision]
    if meta is not None:
        f[META_SLOT, 12:16] = meta_codes(meta)
    if analysis is not None:
        f[ANALYSIS_SLOT] = _analysis_slot(analysis, tau_neg)
    return f


def scene_only(features: np.ndarray) -> np.ndarray:
    """Pass-A input: meta context and analysis slots zeroed."""
    out = np.array(features, dtype=float, copy=True)
    out[..., META_SLOT, :] = 0.0
    out[..., ANALYSIS_SLOT, :] = 0.0
    return out


def with_meta(features: np.ndarray, codes: np.ndarray | None) -> np.ndarray:
    """Copy of ``features`` (..., S, D) with the meta slot set to ``codes`` (or zeroed)."""
    out = np.array(features, dtype=float, copy=True)
    out[..., META_SLOT, :] = 0.0
    if codes is not None:
        out[..., META_SLOT, 12:16] = codes
    return out


def decode_meta(logits: np.ndarray) -> tuple[DrivingCommand, DrivingCommand]:
    g = [int(np.argmax(logits[s])) for s in META_GROUPS]
    return (
        DrivingCommand(SPEED_DECISIONS[g[0]], DIRECTION_DECISIONS[g[1]]),
        DrivingCommand(SPEED_DECISIONS[g[2]], DIRECTION_DECISIONS[g[3]]),
    )


def meta_targets(meta: Sequence[DrivingCommand]) -> np.ndarray:
    """Class indices for the four softmax groups."""
    short, long = meta
    return np.array([
        SPEED_DECISIONS.index(short.speed_decision),
        DIRECTION_DECISIONS.index(short.direction_decision),
        SPEED_DECISIONS.index(long.speed_decision),
        DIRECTION_DECISIONS.index(long.direction_decision),
    ])


# ---------------------------------------------------------------------------
# forward pieces


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def pool(features: np.ndarray, params: PolicyParams) -> np.ndarray:
    """Softmax-over-slots weighted sum; works on (S, D) or (B, S, D)."""
    att = _softmax(features @ params["pool_w"] + params["pool_b"][0])
    return np.einsum("...s,...sd->...d", att, features)


def perturb(pooled: np.ndarray, sigma: float, rng: np.random.Generator | None) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.array(pooled, dtype=float, copy=True)
    return pooled + rng.normal(0.0, sigma, np.shape(pooled))


def steps_to_waypoints(steps: np.ndarray) -> np.ndarray:
    """(..., 16) per-step displacements -> (..., 8, 2) cumulative waypoints."""
    return np.cumsum(steps.reshape(*steps.shape[:-1], N_FUTURE, 2), axis=-2)


def _action(f: np.ndarray, p: PolicyParams):
    h1 = np.tanh(f @ p["W1"].T + p["b1"])
    h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
    out = h2 @ p["W3"].T + p["b3"]
    return h1, h2, out


def to_trajectory(waypoints: np.ndarray) -> Trajectory:
    return Trajectory(FUTURE_TIMES, waypoints, SUPERVISION_HZ)


@dataclass(frozen=True)
class PolicyOutput:
    trajectory: Trajectory
    meta_logits: np.ndarray


def act(perturbed: np.ndarray, params: PolicyParams, meta_pooled: np.ndarray | None = None) -> PolicyOutput:
    """Decode one pooled vector. Meta logits read ``meta_pooled`` (defaults to the input)."""
    _, _, out = _action(perturbed, params)
    src = perturbed if meta_pooled is None else meta_pooled
    logits = params["M"] @ src + params["c"]
    wp = steps_to_waypoints(out)
    if not (np.all(np.isfinite(wp)) and np.all(np.isfinite(logits))):
        raise DivergenceError("non-finite policy output")
    return PolicyOutput(to_trajectory(wp), logits)


# ---------------------------------------------------------------------------
# batched two-pass forward / backward


@dataclass
class Cache:
    xa: np.ndarray
    att_a: np.ndarray
    pooled_a: np.ndarray
    xb: np.ndarray
    att_b: np.ndarray
    f: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


def forward(params: PolicyParams, xa: np.ndarray, xb: np.ndarray, noise: np.ndarray | None = None):
    """Batched forward. ``xa``/``xb`` are (B, S, D) pass-A/pass-B features.

    Returns (waypoints (B, 8, 2), meta_logits (B, 16), cache).
    """
    w, b = params["pool_w"], params["pool_b"][0]
    att_a = _softmax(xa @ w + b)
    pooled_a = np.einsum("bs,bsd->bd", att_a, xa)
    logits = pooled_a @ params["M"].T + params["c"]
    att_b = _softmax(xb @ w + b)
    f = np.einsum("bs,bsd->bd", att_b, xb)
    if noise is not None:
        f = f + noise
    h1, h2, out = _action(f, params)
    wp = steps_to_waypoints(out)
    if not (np.all(np.isfinite(wp)) and np.all(np.isfinite(logits))):
        raise DivergenceError("non-finite policy output")
    return wp, logits, Cache(xa, att_a, pooled_a, xb, att_b, f, h1, h2)


def _pool_backward(x: np.ndarray, att: np.ndarray, d_pooled: np.ndarray):
    d_att = np.einsum("bd,bsd->bs", d_pooled, x)
    d_score = att * (d_att - np.sum(att * d_att, axis=1, keepdims=True))
    return np.einsum("bs,bsd->d", d_score, x), np.array([d_score.sum()])


def backward(params: PolicyParams, cache: Cache, d_wp: np.ndarray | None, d_logits: np.ndarray | None) -> PolicyParams:
    """Gradients given upstream derivatives w.r.t. waypoints and meta logits."""
    g = {name: np.zeros(shape) for name, shape in PARAM_SHAPES.items()}
    if d_wp is not None and np.any(d_wp):
        # waypoint k = sum of steps 1..k, so d step_j = sum_{k>=j} d waypoint_k
        d_steps = np.flip(np.cumsum(np.flip(d_wp, axis=1), axis=1), axis=1).reshape(len(d_wp), OUT)
        g["W3"] = d_steps.T @ cache.h2
        g["b3"] = d_steps.sum(axis=0)
        dz2 = (d_steps @ params["W3"]) * (1.0 - cache.h2**2)
        g["W2"] = dz2.T @ cache.h1
        g["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ params["W2"]) * (1.0 - cache.h1**2)
        g["W1"] = dz1.T @ cache.f
        g["b1"] = dz1.sum(axis=0)
        dw, db = _pool_backward(cache.xb, cache.att_b, dz1 @ params["W1"])
        g["pool_w"] += dw
        g["pool_b"] += db
    if d_logits is not None and np.any(d_logits):
        g["M"] = d_logits.T @ cache.pooled_a
        g["c"] = d_logits.sum(axis=0)
        dw, db = _pool_backward(cache.xa, cache.att_a, d_logits @ params["M"])
        g["pool_w"] += dw
        g["pool_b"] += db
    grads = PolicyParams(g)
    if not grads.is_finite():
        raise DivergenceError("non-finite gradient")
    return grads


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray | None, np.ndarray | None]]


def grad(loss_fn: LossFn, params: PolicyParams, inputs) -> tuple[float, PolicyParams]:
    """Loss and analytic parameter gradients.

    ``inputs`` is (xa, xb, noise); ``loss_fn(waypoints, logits)`` returns the
    loss and its derivatives w.r.t. waypoints and logits (either may be None).
    """
    xa, xb, noise = inputs
    wp, logits, cache = forward(params, xa, xb, noise)
    loss, d_wp, d_logits = loss_fn(wp, logits)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    return float(loss), backward(params, cache, d_wp, d_logits)


def update(
    params: PolicyParams,
    grads: PolicyParams,
    lr: float | Mapping[str, float],
    groups: Sequence[str] | None = None,
) -> PolicyParams:
    """Plain SGD. ``lr`` is a scalar or a per-group mapping; ``groups`` limits which groups move."""
    rates = {g: lr for g in GROUPS} if np.isscalar(lr) else dict(lr)
    active = set(GROUPS if groups is None else groups)
    for g in active:
        if rates.get(g, 0.0) < 0:
            raise ValueError("learning rate must be non-negative")
    return params.map(
        lambda n, a: a - rates.get(GROUP_OF[n], 0.0) * grads[n] if GROUP_OF[n] in active else a.copy()
    )


# ---------------------------------------------------------------------------
# inference


def stack_features(feats: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(feats) if len(feats) else np.zeros((0, N_SLOTS, DIM))


def predict_meta(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """Argmax meta codes (B, 4) from pass A."""
    xa = scene_only(features)
    pooled = np.einsum("bs,bsd->bd", _softmax(xa @ params["pool_w"] + params["pool_b"][0]), xa)
    logits = pooled @ params["M"].T + params["c"]
    return np.stack([meta_codes(decode_meta(row)) for row in logits])


def prepare_inputs(
    params: PolicyParams, features: np.ndarray, meta: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """(xa, xb) for a batch; ``meta`` codes teacher-force pass B, else pass-A argmax is used."""
    features = np.asarray(features, dtype=float)
    xa = scene_only(features)
    codes = predict_meta(params, features) if meta is None else meta
    return xa, with_meta(features, codes)


def plan(
    params: PolicyParams,
    scene: Scene,
    analysis: NegativeAnalysisBlock | None = None,
    tau_neg: Trajectory | None = None,
    sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    n: int = 1,
) -> list[Trajectory]:
    """``n`` trajectories for one scene; noise only enters pass B."""
    feats = encode_features(scene, analysis, tau_neg)[None]
    xa, xb = prepare_inputs(params, feats)
    xa = np.repeat(xa, n, axis=0)
    xb = np.repeat(xb, n, axis=0)
    noise = None if sigma == 0 else rng.normal(0.0, sigma, (n, DIM))
    wp, _, _ = forward(params, xa, xb, noise)
    return [to_trajectory(w) for w in wp]
