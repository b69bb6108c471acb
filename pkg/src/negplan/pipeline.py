"""Glue shared by the CLI and the experiment tests."""

from __future__ import annotations

from typing import Sequence

from .csp import CspRecord
from .metrics import EvalReport, SceneEval, evaluate_dataset
from .policy import PolicyParams, plan
from .scenario import Scene, generate_scene

SCENE_CSV_COLUMNS = ("scene_id", "pdms", "nc", "dac", "ep", "ttc", "comfort", "l2_1s", "l2_4s", "fde")


def scene_suite(templates: Sequence[str], n: int, seed_offset: int) -> list[Scene]:
    """Scene ``i`` uses template ``templates[i % len]`` and seed ``seed_offset + i``."""
    return [generate_scene(templates[i % len(templates)], seed_offset + i) for i in range(n)]


def evaluate_policy(params: PolicyParams, records: Sequence[CspRecord]) -> tuple[EvalReport, list[SceneEval]]:
    """Deterministic inference (no noise, no analysis) scored against each record's tau_pos."""
    preds = [plan(params, r.scene)[0] for r in records]
    return evaluate_dataset(
        preds,
        [r.scene for r in records],
        [r.tau_pos for r in records],
        [r.reference_progress for r in records],
    )


def scene_row(row: SceneEval) -> tuple:
    s = row.sub
    return (row.scene_id, row.pdms, s.nc, s.dac, s.ep, s.ttc, s.comfort, row.l2_at_1s, row.l2_at_4s, row.fde)
