"""Counterfactual safety pairing: label scenes by TTC, replan risky ones.

Each scene yields one record. Safe scenes supervise on the observed future.
Risky scenes keep the observed future as the negative anchor and take the
best-scoring longitudinal replan along the centerline as the positive target,
together with a structured negative-analysis block and reasoning record.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import wrap_angle
from .metrics import (
    TTC_RISK,
    pdms,
    scene_ttc_min,
    score_trajectory,
    trajectory_progress,
    ttc_min,
    with_start,
)
from .scenario import (
    HORIZON_S,
    SHORT_TERM_S,
    DirectionDecision,
    DrivingCommand,
    EgoState,
    Scene,
    SceneMap,
    SpeedDecision,
    Trajectory,
    follow_centerline,
)

ACCEL_GRID = (-3.0, -1.5, 0.0, 1.0)
N_CANDIDATES = len(ACCEL_GRID) ** 2
SPEED_BAND = 0.1
TURN_THRESHOLD = math.radians(10.0)
_MIN_REFERENCE = 1e-6


class Label(str, enum.Enum):
    POS = "Pos"
    NEG = "Neg"


class Axis(str, enum.Enum):
    LONGITUDINAL = "longitudinal"
    LATERAL = "lateral"


@dataclass(frozen=True)
class SafetyLabel:
    value: Label
    ttc_min: float

    def __post_init__(self):
        if (self.value is Label.POS) != (self.ttc_min >= TTC_RISK):
            raise ValueError("label inconsistent with ttc_min")


def label_from_ttc(ttc: float) -> SafetyLabel:
    return SafetyLabel(Label.POS if ttc >= TTC_RISK else Label.NEG, float(ttc))


def label_scene(scene: Scene) -> SafetyLabel:
    return label_from_ttc(scene_ttc_min(scene, scene.observed_future))


# ---------------------------------------------------------------------------
# candidates


def accel_scale(v0: float) -> float:
    return float(np.clip(v0 / 10.0, 0.3, 1.0))


def candidate_profiles(v0: float, grid: Sequence[float] = ACCEL_GRID) -> list[tuple[float, float]]:
    """(stage-1, stage-2) accelerations, stage-1 major order, scaled by speed."""
    k = accel_scale(v0)
    return [(a1 * k, a2 * k) for a1 in grid for a2 in grid]


def generate_candidates(scene: Scene, k: int = N_CANDIDATES, grid: Sequence[float] = ACCEL_GRID) -> list[Trajectory]:
    if k != len(grid) ** 2:
        raise ValueError(f"K={k} does not match the {len(grid)}x{len(grid)} acceleration grid")
    return [
        follow_centerline(scene.map, scene.ego, [(0.0, a1), (SHORT_TERM_S, a2)], HORIZON_S)
        for a1, a2 in candidate_profiles(scene.ego.speed, grid)
    ]


@dataclass(frozen=True)
class CandidateScore:
    index: int
    accel: tuple[float, float]
    meta_actions: tuple[DrivingCommand, DrivingCommand]
    pdms: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "accel": list(self.accel),
            "meta_actions": [m.to_dict() for m in self.meta_actions],
            "pdms": self.pdms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateScore":
        return cls(
            d["index"], tuple(d["accel"]),
            tuple(DrivingCommand.from_dict(m) for m in d["meta_actions"]), d["pdms"],
        )


@dataclass(frozen=True)
class Selection:
    tau_pos: Trajectory
    reference_progress: float
    index: int
    scores: tuple[float, ...]
    degenerate: bool


def select_counterfactual(candidates: Sequence[Trajectory], scene: Scene) -> Selection:
    """Argmax-PDMS candidate (lowest index on ties).

    EP is scored against the largest candidate progress; the winner's own
    progress becomes the scene's EP reference.
    """
    if not candidates:
        raise ValueError("no candidates")
    prog = [trajectory_progress(scene, c) for c in candidates]
    ref = max(max(prog), _MIN_REFERENCE)
    scores = tuple(pdms(score_trajectory(scene, c, ref)) for c in candidates)
    best = int(np.argmax(scores))
    return Selection(
        tau_pos=candidates[best],
        reference_progress=max(prog[best], _MIN_REFERENCE),
        index=best,
        scores=scores,
        degenerate=scores[best] <= 0.0,
    )


# ---------------------------------------------------------------------------
# meta-actions


def _path_headings(xy: np.ndarray, initial: float) -> np.ndarray:
    """Heading of each segment; stationary segments inherit the previous one."""
    step = np.diff(xy, axis=0)
    out = np.empty(len(step))
    current = initial
    for i, (dx, dy) in enumerate(step):
        if math.hypot(dx, dy) > 1e-6:
            current = math.atan2(dy, dx)
        out[i] = current
    return out


def _direction(heading_change: float, offset_change: float, lane_width: float) -> DirectionDecision:
    if heading_change > TURN_THRESHOLD:
        return DirectionDecision.TURN_LEFT
    if heading_change < -TURN_THRESHOLD:
        return DirectionDecision.TURN_RIGHT
    if offset_change > lane_width / 2:
        return DirectionDecision.LANE_CHANGE_LEFT
    if offset_change < -lane_width / 2:
        return DirectionDecision.LANE_CHANGE_RIGHT
    return DirectionDecision.KEEP_LANE


def _speed(mean_speed: float, v_ref: float) -> SpeedDecision:
    if mean_speed > v_ref * (1 + SPEED_BAND):
        return SpeedDecision.ACCELERATE
    if mean_speed < v_ref * (1 - SPEED_BAND):
        return SpeedDecision.DECELERATE
    return SpeedDecision.MAINTAIN


def derive_meta_actions(
    traj: Trajectory,
    v0: float,
    scene_map: SceneMap,
    start=(0.0, 0.0),
    start_heading: float = 0.0,
    split_s: float = SHORT_TERM_S,
) -> tuple[DrivingCommand, DrivingCommand]:
    """Short-term [0, T_s) and long-term [T_s, T_p] commands implied by a plan."""
    if traj.t[-1] < HORIZON_S - 1e-6:
        raise ValueError("trajectory does not cover the planning horizon")
    xy = np.vstack([np.asarray(start, dtype=float)[None], traj.xy])
    t = np.concatenate([[0.0], traj.t])
    k = int(np.flatnonzero(np.abs(t - split_s) < 1e-6)[0])
    seg_len = np.hypot(*np.diff(xy, axis=0).T)
    heads = _path_headings(xy, start_heading)
    _, lateral = scene_map.centerline.project(xy[[0, k, -1]])

    v1 = float(seg_len[:k].sum() / (t[k] - t[0]))
    v2 = float(seg_len[k:].sum() / (t[-1] - t[k]))
    short = DrivingCommand(
        _speed(v1, v0),
        _direction(float(wrap_angle(heads[k - 1] - start_heading)), lateral[1] - lateral[0], scene_map.lane_width),
    )
    long = DrivingCommand(
        _speed(v2, v1),
        _direction(float(wrap_angle(heads[-1] - heads[k - 1])), lateral[2] - lateral[1], scene_map.lane_width),
    )
    return short, long


def scene_meta_actions(scene: Scene, traj: Trajectory) -> tuple[DrivingCommand, DrivingCommand]:
    return derive_meta_actions(traj, scene.ego.speed, scene.map, scene.ego.position, scene.ego.heading)


# ---------------------------------------------------------------------------
# negative analysis


@dataclass(frozen=True)
class NegativeAnalysisBlock:
    """Risk identification, failure attribution, counterfactual analysis, correction.

    Errors are signed means of the negative trajectory's offset from the
    positive one in the positive trajectory's local frame; the primary axis is
    the one with the larger mean absolute error. Corrections map each negative
    waypoint onto the positive waypoint with the same timestamp.
    """

    unsafe: bool
    max_deviation: float
    mean_deviation: float
    longitudinal_error: float
    lateral_error: float
    primary_axis: Axis
    counterfactual_analysis: tuple[CandidateScore, ...]
    correction_t: np.ndarray
    correction: np.ndarray  # (n, 2): (d_long, d_lat)
    frame_heading: np.ndarray  # local heading of tau_pos at each waypoint
    degenerate: bool = False
    counterfactual_ttc_min: float | None = None

    def apply(self, traj: Trajectory) -> Trajectory:
        h = self.frame_heading
        u = np.stack([np.cos(h), np.sin(h)], axis=1)
        v = np.stack([-np.sin(h), np.cos(h)], axis=1)
        xy = traj.xy + self.correction[:, :1] * u + self.correction[:, 1:] * v
        return Trajectory(traj.t, xy, traj.rate_hz)

    @property
    def mean_correction(self) -> float:
        return float(np.mean(np.hypot(self.correction[:, 0], self.correction[:, 1])))

    def __eq__(self, other):
        if not isinstance(other, NegativeAnalysisBlock):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "risk_identification": {
                "unsafe": self.unsafe,
                "max_deviation": self.max_deviation,
                "mean_deviation": self.mean_deviation,
                "counterfactual_degenerate": self.degenerate,
                "counterfactual_ttc_min": self.counterfactual_ttc_min,
            },
            "failure_attribution": {
                "longitudinal_error": self.longitudinal_error,
                "lateral_error": self.lateral_error,
                "primary_axis": self.primary_axis.value,
            },
            "counterfactual_analysis": [c.to_dict() for c in self.counterfactual_analysis],
            "actionable_correction": {
                "t": self.correction_t.tolist(),
                "delta": self.correction.tolist(),
                "frame_heading": self.frame_heading.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NegativeAnalysisBlock":
        risk, fail, corr = d["risk_identification"], d["failure_attribution"], d["actionable_correction"]
        return cls(
            unsafe=risk["unsafe"],
            max_deviation=risk["max_deviation"],
            mean_deviation=risk["mean_deviation"],
            longitudinal_error=fail["longitudinal_error"],
            lateral_error=fail["lateral_error"],
            primary_axis=Axis(fail["primary_axis"]),
            counterfactual_analysis=tuple(CandidateScore.from_dict(c) for c in d["counterfactual_analysis"]),
            correction_t=np.array(corr["t"], dtype=float),
            correction=np.array(corr["delta"], dtype=float).reshape(-1, 2),
            frame_heading=np.array(corr["frame_heading"], dtype=float),
            degenerate=risk["counterfactual_degenerate"],
            counterfactual_ttc_min=risk.get("counterfactual_ttc_min"),
        )


def local_headings(traj: Trajectory, start=(0.0, 0.0), start_heading: float = 0.0) -> np.ndarray:
    """Direction of travel at each waypoint (segment arriving at it)."""
    xy = np.vstack([np.asarray(start, dtype=float)[None], traj.xy])
    return _path_headings(xy, start_heading)


def build_negative_analysis(
    tau_neg: Trajectory,
    tau_pos: Trajectory,
    candidate_scores: Sequence[CandidateScore] = (),
    start=(0.0, 0.0),
    start_heading: float = 0.0,
    degenerate: bool = False,
    counterfactual_ttc_min: float | None = None,
) -> NegativeAnalysisBlock:
    if len(tau_neg) != len(tau_pos) or tau_neg.rate_hz != tau_pos.rate_hz:
        raise ValueError("trajectories differ in length or rate")
    h = local_headings(tau_pos, start, start_heading)
    dev = tau_neg.xy - tau_pos.xy
    lon = dev[:, 0] * np.cos(h) + dev[:, 1] * np.sin(h)
    lat = -dev[:, 0] * np.sin(h) + dev[:, 1] * np.cos(h)
    dist = np.hypot(dev[:, 0], dev[:, 1])
    axis = Axis.LONGITUDINAL if np.mean(np.abs(lon)) >= np.mean(np.abs(lat)) else Axis.LATERAL
    return NegativeAnalysisBlock(
        unsafe=True,
        max_deviation=float(dist.max()),
        mean_deviation=float(dist.mean()),
        longitudinal_error=float(lon.mean()),
        lateral_error=float(lat.mean()),
        primary_axis=axis,
        counterfactual_analysis=tuple(candidate_scores),
        correction_t=np.array(tau_pos.t),
        correction=np.stack([-lon, -lat], axis=1),
        frame_heading=h,
        degenerate=degenerate,
        counterfactual_ttc_min=counterfactual_ttc_min,
    )


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class CotRecord:
    scene_description: dict
    critical_object: int | None
    risk_estimate: SafetyLabel
    counterfactual_reasoning: tuple[CandidateScore, ...]
    meta_actions: tuple[DrivingCommand, DrivingCommand]

    def to_dict(self) -> dict:
        return {
            "scene_description": self.scene_description,
            "critical_object": self.critical_object,
            "risk_estimate": {"value": self.risk_estimate.value.value, "ttc_min": self.risk_estimate.ttc_min},
            "counterfactual_reasoning": [c.to_dict() for c in self.counterfactual_reasoning],
            "meta_actions": [m.to_dict() for m in self.meta_actions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CotRecord":
        return cls(
            scene_description=d["scene_description"],
            critical_object=d["critical_object"],
            risk_estimate=SafetyLabel(Label(d["risk_estimate"]["value"]), d["risk_estimate"]["ttc_min"]),
            counterfactual_reasoning=tuple(CandidateScore.from_dict(c) for c in d["counterfactual_reasoning"]),
            meta_actions=tuple(DrivingCommand.from_dict(m) for m in d["meta_actions"]),
        )


@dataclass(frozen=True)
class CspRecord:
    scene: Scene
    label: SafetyLabel
    tau_pos: Trajectory
    tau_neg: Trajectory | None
    analysis: NegativeAnalysisBlock | None
    cot: CotRecord
    _reference: float | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.label.value is Label.POS:
            if self.tau_neg is not None or self.analysis is not None:
                raise ValueError("Pos record carries a negative anchor")
        elif self.tau_neg is None or self.analysis is None:
            raise ValueError("Neg record needs tau_neg and analysis")

    @property
    def is_neg(self) -> bool:
        return self.label.value is Label.NEG

    @property
    def reference_progress(self) -> float:
        """EP reference: arc-length progress of the positive target."""
        if self._reference is None:
            object.__setattr__(
                self, "_reference", max(trajectory_progress(self.scene, self.tau_pos), _MIN_REFERENCE)
            )
        return self._reference

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "label": self.label.value.value,
            "ttc_min": self.label.ttc_min,
            "tau_pos": self.tau_pos.to_dict(),
            "tau_neg": None if self.tau_neg is None else self.tau_neg.to_dict(),
            "analysis": None if self.analysis is None else self.analysis.to_dict(),
            "cot": self.cot.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CspRecord":
        return cls(
            scene=Scene.from_dict(d["scene"]),
            label=SafetyLabel(Label(d["label"]), d["ttc_min"]),
            tau_pos=Trajectory.from_dict(d["tau_pos"]),
            tau_neg=None if d["tau_neg"] is None else Trajectory.from_dict(d["tau_neg"]),
            analysis=None if d["analysis"] is None else NegativeAnalysisBlock.from_dict(d["analysis"]),
            cot=CotRecord.from_dict(d["cot"]),
        )


def _critical_object(scene: Scene, traj: Trajectory) -> int | None:
    track = with_start(scene, traj)
    best_id, best = None, None
    for agent in scene.agents:
        ttc = ttc_min(track, [agent], HORIZON_S, ego_size=scene.ego.size, ego_heading=scene.ego.heading)
        if ttc < 10.0 and (best is None or ttc < best):
            best_id, best = agent.id, ttc
    return best_id


def _scene_description(scene: Scene) -> dict:
    counts: dict[str, int] = {}
    for a in scene.agents:
        counts[a.kind.value] = counts.get(a.kind.value, 0) + 1
    return {
        "template": scene.template.value,
        "agent_counts": dict(sorted(counts.items())),
        "ego_speed": scene.ego.speed,
        "command": scene.command.to_dict(),
    }


def build_record(scene: Scene) -> CspRecord:
    """Labeling, supervision assignment, reasoning construction for one scene."""
    label = label_scene(scene)
    tau_obs = scene.observed_future
    if label.value is Label.POS:
        tau_pos, tau_neg, analysis, cands = tau_obs, None, None, ()
    else:
        candidates = generate_candidates(scene)
        sel = select_counterfactual(candidates, scene)
        profiles = candidate_profiles(scene.ego.speed)
        cands = tuple(
            CandidateScore(i, profiles[i], scene_meta_actions(scene, c), sel.scores[i])
            for i, c in enumerate(candidates)
        )
        tau_pos, tau_neg = sel.tau_pos, tau_obs
        analysis = build_negative_analysis(
            tau_neg, tau_pos, cands, scene.ego.position, scene.ego.heading,
            sel.degenerate, scene_ttc_min(scene, tau_pos),
        )
    cot = CotRecord(
        scene_description=_scene_description(scene),
        critical_object=_critical_object(scene, tau_obs),
        risk_estimate=label,
        counterfactual_reasoning=cands,
        meta_actions=scene_meta_actions(scene, tau_pos),
    )
    return CspRecord(scene, label, tau_pos, tau_neg, analysis, cot)


def counterfactual_uplift(record: CspRecord) -> float | None:
    """PDMS gain of tau_pos over the observed (zero-acceleration) candidate; None for Pos."""
    if not record.is_neg:
        return None
    scores = record.analysis.counterfactual_analysis
    observed = next(c for c in scores if c.accel == (0.0, 0.0))
    return max(c.pdms for c in scores) - observed.pdms


def build_dataset(scenes: Iterable[Scene], workers: int = 1) -> list[CspRecord]:
    """One record per scene, in input order regardless of ``workers``."""
    scenes = list(scenes)
    if workers > 1 and len(scenes) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build_record, scenes, chunksize=8))
    return [build_record(s) for s in scenes]


def write_records(path, records: Sequence[CspRecord]) -> None:
    from .io import write_jsonl

    write_jsonl(path, [r.to_dict() for r in records])


def read_records(path) -> list[CspRecord]:
    from .io import read_jsonl

    return [CspRecord.from_dict(d) for d in read_jsonl(path)]
