"""Planning-quality and safety metrics: TTC, PDMS sub-scores, displacement errors.

Sub-score conventions:

* collision: oriented-rectangle overlap at 10 Hz. The ego is at fault unless it
  is stationary at first contact or the contact is on its rear face.
* TTC sub-score uses the same 2.0 s threshold as scene labeling.
* comfort: |a_long| <= 4 m/s^2, |a_lat| <= 4 m/s^2, |jerk| <= 8 m/s^3 from
  2 Hz finite differences.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .geometry import Polyline, motion_headings, rect_corners, rects_overlap
from .scenario import (
    EGO_SIZE,
    HORIZON_S,
    SUPERVISION_HZ,
    Agent,
    Scene,
    SceneMap,
    Trajectory,
    concat,
    resample_trajectory,
)

TTC_RISK = 2.0
TTC_CAP = 10.0
TTC_CHECK_DT = 0.1
TTC_SCAN_DT = 0.05
COLLISION_HZ = 10.0
STATIONARY_SPEED = 0.1
MAX_LONG_ACCEL = 4.0
MAX_LAT_ACCEL = 4.0
MAX_JERK = 8.0
_EPS = 1e-9

CSV_COLUMNS = ("pdms", "nc", "dac", "ep", "ttc", "comfort", "l2_1s", "l2_4s", "fde", "coll_rate", "n")


@dataclass(frozen=True)
class SubScores:
    nc: float
    dac: float
    ep: float
    ttc: float
    comfort: float

    def __post_init__(self):
        for name in ("nc", "dac", "ttc", "comfort"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        if not 0.0 <= self.ep <= 1.0:
            raise ValueError("ep must lie in [0, 1]")


def pdms(sub: SubScores) -> float:
    """NC x DAC x (5 EP + 5 TTC + 2 C) / 12."""
    return sub.nc * sub.dac * (5.0 * sub.ep + 5.0 * sub.ttc + 2.0 * sub.comfort) / 12.0


def _fill_headings(vel: np.ndarray, initial: float) -> np.ndarray:
    """Heading of each velocity row; zero rows keep the previous heading."""
    speed = np.hypot(vel[..., 0], vel[..., 1])
    raw = np.arctan2(vel[..., 1], vel[..., 0])
    out = np.empty(len(vel))
    current = float(initial)
    for i in range(len(vel)):
        if speed[i] > 1e-6:
            current = raw[i]
        out[i] = current
    return out


def _state_at(traj: Trajectory, times: np.ndarray, initial_heading: float):
    pos = traj.position_at(times)
    vel = (traj.position_at(times + TTC_CHECK_DT) - pos) / TTC_CHECK_DT
    return pos, vel, _fill_headings(vel, initial_heading)


def ttc_min(
    ego_traj: Trajectory,
    agents: Sequence[Agent],
    horizon_s: float = HORIZON_S,
    ego_size=EGO_SIZE,
    ego_heading: float = 0.0,
    cap: float = TTC_CAP,
) -> float:
    """Minimum constant-velocity time-to-collision over check times in [0, horizon_s].

    At each check time (0.1 s grid) ego and agents are extrapolated at their
    forward-difference velocities; the first overlap on a 0.05 s scan grid up to
    ``cap`` is that check time's TTC.
    """
    if len(ego_traj) == 0:
        raise ValueError("empty trajectory")
    if not agents:
        return float(cap)
    n_check = int(round(horizon_s / TTC_CHECK_DT))
    checks = np.arange(n_check + 1) * TTC_CHECK_DT
    scan = np.arange(int(round(cap / TTC_SCAN_DT)) + 1) * TTC_SCAN_DT
    e_pos, e_vel, e_head = _state_at(ego_traj, checks, ego_heading)
    e_proj = e_pos[:, None, :] + e_vel[:, None, :] * scan[None, :, None]
    best = float(cap)
    for agent in agents:
        a_pos, a_vel, a_head = _state_at(agent.trajectory, checks, agent.heading)
        a_proj = a_pos[:, None, :] + a_vel[:, None, :] * scan[None, :, None]
        hit = rects_overlap(
            e_proj, e_head[:, None], ego_size, a_proj, a_head[:, None], agent.size
        )
        rows = np.flatnonzero(hit.any(axis=1))
        if len(rows):
            first = np.argmax(hit[rows], axis=1)
            best = min(best, float(scan[first].min()))
    return best


def ttc_subscore(ego_traj: Trajectory, agents, horizon_s: float = HORIZON_S, **kw) -> int:
    return int(ttc_min(ego_traj, agents, horizon_s, **kw) >= TTC_RISK)


def _collision_track(ego_traj: Trajectory, ego_heading: float):
    track = resample_trajectory(ego_traj, COLLISION_HZ) if len(ego_traj) > 1 else ego_traj
    return track, motion_headings(track.xy, ego_heading)


def nc_score(
    ego_traj: Trajectory, agents: Sequence[Agent], ego_size=EGO_SIZE, ego_heading: float = 0.0
) -> int:
    """1 unless an at-fault overlap occurs at some 10 Hz step."""
    if not agents:
        return 1
    track, heads = _collision_track(ego_traj, ego_heading)
    times = track.t
    step = np.diff(track.xy, axis=0)
    speeds = np.hypot(step[:, 0], step[:, 1]) * COLLISION_HZ
    for agent in agents:
        a_pos, _, a_head = _state_at(agent.trajectory, times, agent.heading)
        hit = rects_overlap(track.xy, heads, ego_size, a_pos, a_head, agent.size)
        if not hit.any():
            continue
        k = int(np.argmax(hit))
        if len(speeds):
            speed = speeds[k - 1] if k > 0 else speeds[0]
        else:
            speed = 0.0
        if speed < STATIONARY_SPEED:
            continue
        rel = a_pos[k] - track.xy[k]
        local_x = rel[0] * np.cos(heads[k]) + rel[1] * np.sin(heads[k])
        if local_x < -0.5 * ego_size[0]:
            continue
        return 0
    return 1


def dac_score(
    ego_traj: Trajectory, scene_map: SceneMap, ego_size=EGO_SIZE, ego_heading: float = 0.0
) -> int:
    """1 iff every footprint corner at every 10 Hz step is in the drivable area."""
    track, heads = _collision_track(ego_traj, ego_heading)
    corners = rect_corners(track.xy, heads, *ego_size)
    return int(np.all(scene_map.contains(corners)))


def progress(ego_traj: Trajectory, centerline: Polyline) -> float:
    """Signed arc length between the projections of the first and last waypoint."""
    s, _ = centerline.project(ego_traj.xy[[0, -1]])
    return float(s[1] - s[0])


def ep_score(ego_traj: Trajectory, reference_progress: float, centerline: Polyline) -> float:
    if reference_progress <= 0:
        raise ValueError("reference progress must be positive")
    return float(np.clip(progress(ego_traj, centerline) / reference_progress, 0.0, 1.0))


def comfort_score(ego_traj: Trajectory) -> int:
    if len(ego_traj) < 3:
        raise ValueError("comfort needs at least three waypoints")
    traj = ego_traj if ego_traj.rate_hz == SUPERVISION_HZ else resample_trajectory(ego_traj, SUPERVISION_HZ)
    dt = 1.0 / traj.rate_hz
    vel = np.diff(traj.xy, axis=0) / dt
    acc = np.diff(vel, axis=0) / dt
    heads = _fill_headings(0.5 * (vel[:-1] + vel[1:]), np.arctan2(vel[0, 1], vel[0, 0]))
    a_long = acc[:, 0] * np.cos(heads) + acc[:, 1] * np.sin(heads)
    a_lat = -acc[:, 0] * np.sin(heads) + acc[:, 1] * np.cos(heads)
    ok = np.all(np.abs(a_long) <= MAX_LONG_ACCEL + _EPS) and np.all(np.abs(a_lat) <= MAX_LAT_ACCEL + _EPS)
    if len(acc) > 1:
        jerk = np.diff(acc, axis=0) / dt
        ok = ok and np.all(np.hypot(jerk[:, 0], jerk[:, 1]) <= MAX_JERK + _EPS)
    return int(ok)


def displacement_errors(pred: Trajectory, ref: Trajectory) -> tuple[float, float, float]:
    """(L2@1s, L2@4s, FDE) between equally timed trajectories."""
    if len(pred) != len(ref) or pred.rate_hz != ref.rate_hz:
        raise ValueError("trajectories differ in length or rate")
    err = np.hypot(*(pred.xy - ref.xy).T)

    def at(t):
        idx = np.flatnonzero(np.abs(ref.t - t) < 1e-6)
        if not len(idx):
            raise ValueError(f"no waypoint at t={t}")
        return float(err[idx[0]])

    return at(1.0), at(4.0), float(err[-1])


# ---------------------------------------------------------------------------
# scene-level scoring


def with_start(scene: Scene, future: Trajectory) -> Trajectory:
    """Future trajectory prefixed by the ego's t=0 sample."""
    start = Trajectory(np.array([0.0]), np.asarray(scene.ego.position, dtype=float)[None], future.rate_hz)
    return concat(start, future)


def with_history(scene: Scene, future: Trajectory) -> Trajectory:
    return concat(scene.ego_history, future)


def score_trajectory(scene: Scene, future: Trajectory, reference_progress: float) -> SubScores:
    """PDMS sub-scores of a 2 Hz plan for t in (0, T_p] within ``scene``."""
    ego = scene.ego
    track = with_start(scene, future)
    kw = dict(ego_size=ego.size, ego_heading=ego.heading)
    return SubScores(
        nc=nc_score(track, scene.agents, **kw),
        dac=dac_score(track, scene.map, **kw),
        ep=ep_score(track, reference_progress, scene.map.centerline),
        ttc=ttc_subscore(track, scene.agents, **kw),
        comfort=comfort_score(with_history(scene, future)),
    )


def scene_ttc_min(scene: Scene, future: Trajectory) -> float:
    return ttc_min(
        with_start(scene, future), scene.agents, HORIZON_S,
        ego_size=scene.ego.size, ego_heading=scene.ego.heading,
    )


def trajectory_progress(scene: Scene, future: Trajectory) -> float:
    return progress(with_start(scene, future), scene.map.centerline)


@dataclass(frozen=True)
class EvalReport:
    mean_pdms: float
    nc: float
    dac: float
    ep: float
    ttc: float
    comfort: float
    l2_at_1s: float
    l2_at_4s: float
    fde: float
    collision_rate: float
    sample_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_values(self) -> tuple:
        return (
            self.mean_pdms, self.nc, self.dac, self.ep, self.ttc, self.comfort,
            self.l2_at_1s, self.l2_at_4s, self.fde, self.collision_rate, self.sample_count,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in self.csv_values()])
        return buf.getvalue()


@dataclass(frozen=True)
class SceneEval:
    scene_id: str
    sub: SubScores
    pdms: float
    l2_at_1s: float
    l2_at_4s: float
    fde: float


def evaluate_scene(scene: Scene, pred: Trajectory, target: Trajectory, reference_progress: float) -> SceneEval:
    sub = score_trajectory(scene, pred, reference_progress)
    l1, l4, fde = displacement_errors(pred, target)
    return SceneEval(scene.scene_id, sub, pdms(sub), l1, l4, fde)


def aggregate(rows: Sequence[SceneEval]) -> EvalReport:
    if not rows:
        raise ValueError("no samples to aggregate")
    n = len(rows)

    def mean(vals):
        return float(np.mean(np.asarray(vals, dtype=float)))

    return EvalReport(
        mean_pdms=mean([r.pdms for r in rows]),
        nc=mean([r.sub.nc for r in rows]),
        dac=mean([r.sub.dac for r in rows]),
        ep=mean([r.sub.ep for r in rows]),
        ttc=mean([r.sub.ttc for r in rows]),
        comfort=mean([r.sub.comfort for r in rows]),
        l2_at_1s=mean([r.l2_at_1s for r in rows]),
        l2_at_4s=mean([r.l2_at_4s for r in rows]),
        fde=mean([r.fde for r in rows]),
        collision_rate=sum(1 for r in rows if r.sub.nc == 0) / n,
        sample_count=n,
    )


def evaluate_dataset(
    predictions: Sequence[Trajectory],
    scenes: Sequence[Scene],
    targets: Sequence[Trajectory],
    reference_progress: Sequence[float],
) -> tuple[EvalReport, list[SceneEval]]:
    """Score one prediction per scene against its supervision target."""
    if not (len(predictions) == len(scenes) == len(targets) == len(reference_progress)):
        raise ValueError("need exactly one prediction per scene")
    rows = [
        evaluate_scene(s, p, t, r)
        for s, p, t, r in zip(scenes, predictions, targets, reference_progress)
    ]
    return aggregate(rows), rows
