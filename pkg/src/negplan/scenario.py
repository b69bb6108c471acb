"""Driving-world data model and deterministic synthetic scene generation.

Map frame is ego-anchored: the ego sits at the origin at scene time t=0 with
heading along +x. Supervision trajectories are sampled at 2 Hz; scripted agent
motion is stored at 10 Hz.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box

from .geometry import Polyline, motion_headings

SUPERVISION_HZ = 2.0
AGENT_HZ = 10.0
HISTORY_S = 1.5
SHORT_TERM_S = 1.0
HORIZON_S = 4.0
N_FUTURE = int(round(HORIZON_S * SUPERVISION_HZ))  # 8
N_HISTORY = 3
EULER_DT = 0.1
LANE_WIDTH = 3.5
EGO_SIZE = (4.5, 2.0)
FUTURE_TIMES = np.arange(1, N_FUTURE + 1) / SUPERVISION_HZ
HISTORY_TIMES = np.arange(-(N_HISTORY - 1), 1) / SUPERVISION_HZ

_TIME_TOL = 1e-9


class Template(str, enum.Enum):
    FREE_ROAD = "free_road"
    LEAD_BRAKE = "lead_brake"
    CROSSING = "crossing"
    CUT_IN = "cut_in"


class AgentKind(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class SpeedDecision(str, enum.Enum):
    MAINTAIN = "maintain"
    ACCELERATE = "accelerate"
    DECELERATE = "decelerate"


class DirectionDecision(str, enum.Enum):
    KEEP_LANE = "keep_lane"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    LANE_CHANGE_LEFT = "lane_change_left"
    LANE_CHANGE_RIGHT = "lane_change_right"


SPEED_DECISIONS = list(SpeedDecision)
DIRECTION_DECISIONS = list(DirectionDecision)

AGENT_SIZES = {
    AgentKind.VEHICLE: (4.5, 2.0),
    AgentKind.CYCLIST: (1.8, 0.6),
    AgentKind.PEDESTRIAN: (0.6, 0.6),
}


class Waypoint(NamedTuple):
    x: float
    y: float
    t: float


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly timestamped 2D waypoints."""

    t: np.ndarray
    xy: np.ndarray
    rate_hz: float

    def __post_init__(self):
        t = _frozen(self.t).reshape(-1)
        xy = _frozen(self.xy).reshape(-1, 2)
        if len(t) != len(xy):
            raise ValueError("times and points differ in length")
        if len(t) == 0:
            raise ValueError("empty trajectory")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(xy)):
            raise ValueError("non-finite trajectory values")
        if len(t) > 1:
            dt = np.diff(t)
            if np.any(dt <= 0):
                raise ValueError("timestamps must be strictly increasing")
            if np.max(np.abs(dt - 1.0 / self.rate_hz)) > _TIME_TOL * max(1.0, float(np.max(np.abs(t)))):
                raise ValueError("timestamps are not uniform at rate_hz")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "rate_hz", float(self.rate_hz))

    @classmethod
    def from_points(cls, xy, t0: float, rate_hz: float) -> "Trajectory":
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return cls(t0 + np.arange(len(xy)) / rate_hz, xy, rate_hz)

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.rate_hz == other.rate_hz
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.xy, other.xy)
        )

    __hash__ = None

    @property
    def waypoints(self) -> list[Waypoint]:
        return [Waypoint(float(x), float(y), float(t)) for (x, y), t in zip(self.xy, self.t)]

    def position_at(self, times) -> np.ndarray:
        """Linear interpolation; times outside the span extrapolate the end segments."""
        times = np.asarray(times, dtype=float)
        if len(self.t) == 1:
            return np.broadcast_to(self.xy[0], times.shape + (2,)).copy()
        x = np.interp(times, self.t, self.xy[:, 0])
        y = np.interp(times, self.t, self.xy[:, 1])
        for end, (i0, i1) in (("lo", (0, 1)), ("hi", (-2, -1))):
            mask = times < self.t[0] if end == "lo" else times > self.t[-1]
            if np.any(mask):
                v = (self.xy[i1] - self.xy[i0]) / (self.t[i1] - self.t[i0])
                ref_t = self.t[i0] if end == "lo" else self.t[i1]
                ref_p = self.xy[i0] if end == "lo" else self.xy[i1]
                x = np.where(mask, ref_p[0] + v[0] * (times - ref_t), x)
                y = np.where(mask, ref_p[1] + v[1] * (times - ref_t), y)
        return np.stack([x, y], axis=-1)

    def translated(self, offset) -> "Trajectory":
        return Trajectory(self.t, self.xy + np.asarray(offset, dtype=float), self.rate_hz)

    def to_dict(self) -> dict:
        return {"rate_hz": self.rate_hz, "t": self.t.tolist(), "xy": self.xy.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(np.array(d["t"], dtype=float), np.array(d["xy"], dtype=float), d["rate_hz"])


def concat(a: Trajectory, b: Trajectory) -> Trajectory:
    """Join two trajectories at the same rate; a shared boundary sample is kept once."""
    if a.rate_hz != b.rate_hz:
        raise ValueError("rate mismatch")
    if abs(a.t[-1] - b.t[0]) <= _TIME_TOL:
        b_t, b_xy = b.t[1:], b.xy[1:]
    else:
        b_t, b_xy = b.t, b.xy
    return Trajectory(np.concatenate([a.t, b_t]), np.concatenate([a.xy, b_xy]), a.rate_hz)


def resample_trajectory(traj: Trajectory, rate_hz: float) -> Trajectory:
    """Linear resampling in x, y over t. Endpoints are preserved exactly."""
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    if len(traj) < 2:
        raise ValueError("need at least two waypoints to resample")
    if rate_hz == traj.rate_hz:
        return traj
    t0, t1 = float(traj.t[0]), float(traj.t[-1])
    n = int(round((t1 - t0) * rate_hz))
    times = t0 + np.arange(n + 1) / rate_hz
    times[-1] = t1
    xy = np.stack(
        [np.interp(times, traj.t, traj.xy[:, 0]), np.interp(times, traj.t, traj.xy[:, 1])],
        axis=-1,
    )
    xy[0], xy[-1] = traj.xy[0], traj.xy[-1]
    return Trajectory(times, xy, rate_hz)


@dataclass(frozen=True)
class EgoState:
    position: tuple[float, float]
    heading: float
    speed: float
    length: float = EGO_SIZE[0]
    width: float = EGO_SIZE[1]

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("footprint dimensions must be positive")

    @property
    def size(self) -> tuple[float, float]:
        return (self.length, self.width)

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "heading": self.heading,
            "speed": self.speed,
            "length": self.length,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EgoState":
        return cls(tuple(d["position"]), d["heading"], d["speed"], d["length"], d["width"])


@dataclass(frozen=True)
class Agent:
    """Scripted road user. ``heading`` applies while the agent has not moved."""

    id: int
    kind: AgentKind
    length: float
    width: float
    trajectory: Trajectory
    heading: float = 0.0

    @property
    def size(self) -> tuple[float, float]:
        return (self.length, self.width)

    def headings(self) -> np.ndarray:
        return motion_headings(self.trajectory.xy, self.heading)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "length": self.length,
            "width": self.width,
            "heading": self.heading,
            "trajectory": self.trajectory.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        return cls(
            d["id"], AgentKind(d["kind"]), d["length"], d["width"],
            Trajectory.from_dict(d["trajectory"]), d["heading"],
        )


@dataclass(frozen=True, eq=False)
class SceneMap:
    centerline: Polyline
    lane_width: float
    drivable_area: tuple[np.ndarray, ...]
    _union: object = field(default=None, repr=False)

    def __post_init__(self):
        polys = tuple(_frozen(p) for p in self.drivable_area)
        if not polys:
            raise ValueError("drivable area is empty")
        shapes = [Polygon(p) for p in polys]
        if not all(s.is_valid for s in shapes):
            raise ValueError("drivable polygon is self-intersecting")
        union = shapely.union_all(shapes)
        shapely.prepare(union)
        object.__setattr__(self, "drivable_area", polys)
        object.__setattr__(self, "_union", union)

    @property
    def drivable(self):
        return self._union

    def contains(self, xy) -> np.ndarray:
        """Boundary-inclusive membership of points in the drivable union."""
        xy = np.asarray(xy, dtype=float)
        return shapely.intersects_xy(self._union, xy[..., 0], xy[..., 1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneMap):
            return NotImplemented
        return (
            self.lane_width == other.lane_width
            and np.array_equal(self.centerline.points, other.centerline.points)
            and len(self.drivable_area) == len(other.drivable_area)
            and all(np.array_equal(a, b) for a, b in zip(self.drivable_area, other.drivable_area))
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "centerline": self.centerline.points.tolist(),
            "lane_width": self.lane_width,
            "drivable_area": [p.tolist() for p in self.drivable_area],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneMap":
        return cls(
            Polyline(d["centerline"]), d["lane_width"],
            tuple(np.array(p, dtype=float) for p in d["drivable_area"]),
        )


@dataclass(frozen=True)
class DrivingCommand:
    speed_decision: SpeedDecision
    direction_decision: DirectionDecision

    def to_dict(self) -> dict:
        return {"speed": self.speed_decision.value, "direction": self.direction_decision.value}

    @classmethod
    def from_dict(cls, d: dict) -> "DrivingCommand":
        return cls(SpeedDecision(d["speed"]), DirectionDecision(d["direction"]))


@dataclass(frozen=True)
class Scene:
    seed: int
    template: Template
    ego: EgoState
    ego_history: Trajectory
    agents: tuple[Agent, ...]
    map: SceneMap
    command: DrivingCommand
    observed_future: Trajectory

    def __post_init__(self):
        if len(self.observed_future) != N_FUTURE:
            raise ValueError("observed future must have %d waypoints" % N_FUTURE)
        if not np.allclose(self.ego_history.xy[-1], self.ego.position, atol=1e-9):
            raise ValueError("ego history must end at the ego position")
        object.__setattr__(self, "agents", tuple(self.agents))

    @property
    def scene_id(self) -> str:
        return f"{self.template.value}-{self.seed}"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "template": self.template.value,
            "ego": self.ego.to_dict(),
            "ego_history": self.ego_history.to_dict(),
            "agents": [a.to_dict() for a in self.agents],
            "map": self.map.to_dict(),
            "command": self.command.to_dict(),
            "observed_future": self.observed_future.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            seed=d["seed"],
            template=Template(d["template"]),
            ego=EgoState.from_dict(d["ego"]),
            ego_history=Trajectory.from_dict(d["ego_history"]),
            agents=tuple(Agent.from_dict(a) for a in d["agents"]),
            map=SceneMap.from_dict(d["map"]),
            command=DrivingCommand.from_dict(d["command"]),
            observed_future=Trajectory.from_dict(d["observed_future"]),
        )


def dumps_record(d: dict) -> str:
    """One JSONL line. Floats use shortest round-trip repr (17 significant digits max)."""
    return json.dumps(d, separators=(",", ":"), allow_nan=False)


def write_scenes(path, scenes: Sequence[Scene]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(dumps_record(s.to_dict()) + "\n" for s in scenes))


def read_scenes(path) -> list[Scene]:
    from .io import read_jsonl

    return [Scene.from_dict(d) for d in read_jsonl(path)]


# ---------------------------------------------------------------------------
# kinematics


def accel_at(profile: Sequence[tuple[float, float]], t: float) -> float:
    """Piecewise-constant acceleration: ``profile`` is [(stage_start_s, accel), ...]."""
    a = profile[0][1]
    for start, value in profile:
        if t + 1e-12 >= start:
            a = value
    return a


def follow_centerline(
    scene_map: SceneMap,
    start: EgoState,
    accel_profile: Sequence[tuple[float, float]],
    horizon_s: float = HORIZON_S,
    rate_hz: float = SUPERVISION_HZ,
) -> Trajectory:
    """Longitudinal replanning along the lane centerline.

    Speed is integrated by forward Euler at 0.1 s with clamping at zero; arc
    length is the exact integral of that piecewise-linear speed. Output is
    sampled at ``rate_hz`` for t in (0, horizon_s].
    """
    if horizon_s <= 0:
        raise ValueError("horizon must be positive")
    s0, lateral = scene_map.centerline.project(np.asarray(start.position, dtype=float))
    if abs(lateral[0]) > scene_map.lane_width / 2 + 1e-9:
        raise ValueError("start is outside the lane")
    n_steps = int(round(horizon_s / EULER_DT))
    v = np.empty(n_steps + 1)
    v[0] = start.speed
    for k in range(n_steps):
        a = accel_at(accel_profile, k * EULER_DT)
        v[k + 1] = max(0.0, v[k] + a * EULER_DT)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (v[:-1] + v[1:]) * EULER_DT)])
    stride = int(round(1.0 / (rate_hz * EULER_DT)))
    idx = np.arange(stride, n_steps + 1, stride)
    xy = scene_map.centerline.point_at(s0[0] + s[idx])
    return Trajectory(idx * EULER_DT, xy, rate_hz)


# ---------------------------------------------------------------------------
# scene generation

_TEMPLATE_CODE = {t: i for i, t in enumerate(Template)}
_BACK = 60.0
_AHEAD = 180.0


def _straight_centerline() -> Polyline:
    return Polyline([[-_BACK, 0.0], [_AHEAD, 0.0]])


def _curved_centerline(curvature: float) -> Polyline:
    s = np.arange(0.0, _AHEAD + 1.0, 1.0)
    th = curvature * s
    x = np.sin(th) / curvature
    y = (1.0 - np.cos(th)) / curvature
    pts = np.concatenate([[[-_BACK, 0.0]], np.stack([x, y], axis=1)])
    return Polyline(pts)


def _road_polygon(line: Polyline, half_width: float) -> np.ndarray:
    poly = LineString(line.points).buffer(half_width, cap_style="flat", join_style="round", quad_segs=4)
    return np.asarray(poly.exterior.coords)[:-1]


def _agent_from_velocities(
    agent_id: int, kind: AgentKind, p0, velocity_fn, heading: float = 0.0
) -> Agent:
    """Integrate a piecewise-constant velocity script at 10 Hz over [-T_h, T_p]."""
    times = np.round(np.arange(-HISTORY_S * AGENT_HZ, HORIZON_S * AGENT_HZ + 1) / AGENT_HZ, 10)
    xy = np.empty((len(times), 2))
    p = np.asarray(p0, dtype=float)
    # p0 is the position at t=0; integrate backward then forward.
    i0 = int(np.argmin(np.abs(times)))
    xy[i0] = p
    for i in range(i0, len(times) - 1):
        xy[i + 1] = xy[i] + np.asarray(velocity_fn(times[i])) / AGENT_HZ
    for i in range(i0, 0, -1):
        xy[i - 1] = xy[i] - np.asarray(velocity_fn(times[i - 1])) / AGENT_HZ
    length, width = AGENT_SIZES[kind]
    return Agent(agent_id, kind, length, width, Trajectory(times, xy, AGENT_HZ), heading)


def _ego_history(line: Polyline, speed: float) -> Trajectory:
    s0 = float(line.project([0.0, 0.0])[0][0])
    xy = line.point_at(s0 + speed * HISTORY_TIMES)
    xy[-1] = (0.0, 0.0)
    return Trajectory(HISTORY_TIMES, xy, SUPERVISION_HZ)


def _route_command(line: Polyline) -> DrivingCommand:
    s0 = float(line.project([0.0, 0.0])[0][0])
    turn = float(line.heading_at(s0 + 50.0) - line.heading_at(s0))
    if turn > math.radians(10):
        direction = DirectionDecision.TURN_LEFT
    elif turn < -math.radians(10):
        direction = DirectionDecision.TURN_RIGHT
    else:
        direction = DirectionDecision.KEEP_LANE
    return DrivingCommand(SpeedDecision.MAINTAIN, direction)


def _gen_free_road(rng):
    v0 = rng.uniform(5.0, 14.0)
    agents = []
    if rng.random() < 0.5:
        curvature = rng.choice([-1.0, 1.0]) * rng.uniform(1 / 150, 1 / 60)
        line = _curved_centerline(curvature)
    else:
        line = _straight_centerline()
        if rng.random() < 0.6:
            gap = rng.uniform(35.0, 60.0)
            vl = v0 + rng.uniform(2.0, 5.0)
            agents.append(_agent_from_velocities(1, AgentKind.VEHICLE, (gap, 0.0), lambda t: (vl, 0.0)))
        if rng.random() < 0.5:
            side = rng.choice([-1.0, 1.0])
            x0 = rng.uniform(10.0, 50.0)
            vp = rng.uniform(1.0, 1.6) * rng.choice([-1.0, 1.0])
            agents.append(
                _agent_from_velocities(
                    2, AgentKind.PEDESTRIAN, (x0, side * (1.5 * LANE_WIDTH + 2.0)),
                    lambda t: (vp, 0.0), 0.0 if vp > 0 else math.pi,
                )
            )
    return v0, line, [], agents


def _gen_lead_brake(rng):
    v0 = rng.uniform(8.0, 14.0)
    line = _straight_centerline()
    vl0 = max(2.0, v0 + rng.uniform(-1.0, 1.0))
    gap = rng.uniform(14.0, 30.0)
    t_brake = rng.uniform(-0.5, 1.5)
    decel = rng.uniform(3.0, 7.0)

    def lead_v(t):
        if t < t_brake:
            return (vl0, 0.0)
        return (max(0.0, vl0 - decel * (t - t_brake)), 0.0)

    agents = [_agent_from_velocities(1, AgentKind.VEHICLE, (gap, 0.0), lead_v)]
    if rng.random() < 0.4:
        vo = rng.uniform(8.0, 14.0)
        agents.append(
            _agent_from_velocities(
                2, AgentKind.VEHICLE, (rng.uniform(30.0, 80.0), LANE_WIDTH), lambda t: (-vo, 0.0), math.pi
            )
        )
    return v0, line, [], agents


def _gen_crossing(rng):
    v0 = rng.uniform(7.0, 13.0)
    line = _straight_centerline()
    x_c = rng.uniform(18.0, 35.0)
    kind = [AgentKind.VEHICLE, AgentKind.CYCLIST, AgentKind.PEDESTRIAN][rng.integers(3)]
    speed = {
        AgentKind.VEHICLE: rng.uniform(6.0, 10.0),
        AgentKind.CYCLIST: rng.uniform(3.0, 6.0),
        AgentKind.PEDESTRIAN: rng.uniform(1.2, 2.0),
    }[kind]
    from_left = rng.random() < 0.5
    direction = -1.0 if from_left else 1.0
    t_arrive = x_c / v0 + rng.uniform(-0.6, 0.6)
    y0 = -direction * speed * t_arrive
    agents = [
        _agent_from_velocities(
            1, kind, (x_c, y0), lambda t: (0.0, direction * speed), direction * math.pi / 2
        )
    ]
    cross = box(x_c - LANE_WIDTH, -_BACK, x_c + LANE_WIDTH, _BACK)
    extra = [np.asarray(cross.exterior.coords)[:-1]]
    return v0, line, extra, agents


def _gen_cut_in(rng):
    v0 = rng.uniform(9.0, 14.0)
    line = _straight_centerline()
    gap = rng.uniform(6.0, 18.0)
    vc = v0 - rng.uniform(1.0, 4.0)
    t_start = rng.uniform(-0.5, 1.0)
    duration = rng.uniform(1.0, 2.0)
    vy = -LANE_WIDTH / duration

    def cut_v(t):
        if t_start <= t < t_start + duration - 1e-9:
            return (vc, vy)
        return (vc, 0.0)

    # position at t=0 accounts for any lateral motion already done
    done = min(max(0.0, -t_start), duration)
    y0 = LANE_WIDTH + vy * done
    agents = [_agent_from_velocities(1, AgentKind.VEHICLE, (gap, y0), cut_v)]
    return v0, line, [], agents


_GENERATORS = {
    Template.FREE_ROAD: _gen_free_road,
    Template.LEAD_BRAKE: _gen_lead_brake,
    Template.CROSSING: _gen_crossing,
    Template.CUT_IN: _gen_cut_in,
}


def generate_scene(template, seed: int) -> Scene:
    """Deterministic synthetic scene for ``(template, seed)``."""
    try:
        template = Template(template)
    except ValueError:
        raise ValueError(f"unknown template: {template!r}") from None
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng([seed, _TEMPLATE_CODE[template]])
    v0, line, extra_polys, agents = _GENERATORS[template](rng)
    v0 = float(v0)
    polys = (_road_polygon(line, 1.5 * LANE_WIDTH), *extra_polys)
    scene_map = SceneMap(line, LANE_WIDTH, polys)
    ego = EgoState((0.0, 0.0), 0.0, v0)
    observed = follow_centerline(scene_map, ego, [(0.0, 0.0)])
    return Scene(
        seed=int(seed),
        template=template,
        ego=ego,
        ego_history=_ego_history(line, v0),
        agents=tuple(agents),
        map=scene_map,
        command=_route_command(line),
        observed_future=observed,
    )


def generate_suite(counts: dict, seed_offset: int = 0) -> list[Scene]:
    """Scenes for each template, seeds ``seed_offset .. seed_offset + n - 1``, template-major order."""
    scenes = []
    for template, n in counts.items():
        for k in range(n):
            scenes.append(generate_scene(template, seed_offset + k))
    return scenes


def mixed_suite(n: int, seed_offset: int = 0) -> list[Scene]:
    """``n`` scenes cycling through the templates; scene i uses seed ``seed_offset + i``."""
    templates = list(Template)
    return [generate_scene(templates[i % len(templates)], seed_offset + i) for i in range(n)]
