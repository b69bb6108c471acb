import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from negplan.geometry import Polyline
from negplan.policy import DIM, MAGIC, PARAM_SHAPES
from negplan.scenario import EgoState, SceneMap, generate_scene

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def straight_map(half_width: float = 5.25, back: float = 60.0, ahead: float = 200.0) -> SceneMap:
    line = Polyline([[-back, 0.0], [ahead, 0.0]])
    poly = np.array([[-back, -half_width], [ahead, -half_width], [ahead, half_width], [-back, half_width]])
    return SceneMap(line, 3.5, (poly,))


def foreign_checkpoint(hidden: int = 32) -> bytes:
    """A well-formed checkpoint for a policy with a different first hidden width."""
    shapes = dict(PARAM_SHAPES, W1=(hidden, DIM), b1=(hidden,), W2=(PARAM_SHAPES["W2"][0], hidden))
    out = MAGIC + struct.pack("<B", 4) + b"sft2" + struct.pack("<I", len(shapes))
    for name, shape in shapes.items():
        out += struct.pack("<B", len(name)) + name.encode() + struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
    return out + b"".join(np.zeros(shape).tobytes() for shape in shapes.values())


@pytest.fixture(scope="session")
def road():
    return straight_map()


@pytest.fixture(scope="session")
def ego10():
    return EgoState((0.0, 0.0), 0.0, 10.0)


@pytest.fixture(scope="session")
def lead_brake_scene():
    return generate_scene("lead_brake", 3)


@pytest.fixture(scope="session")
def crossing_scene():
    return generate_scene("crossing", 11)


@pytest.fixture(scope="session")
def free_scene():
    return generate_scene("free_road", 7)


@dataclass
class PipelineRun:
    root: Path
    codes: dict
    seconds: float

    def file(self, rel: str) -> Path:
        return self.root / rel


def run_pipeline(root: Path, seed: int = 0) -> PipelineRun:
    """gen -> csp -> sft1 -> sft2 -> grpo -> eval (sft2 and grpo) in ``root``."""
    from negplan.cli import main

    base = ["--out-dir", str(root), "--seed", str(seed)]
    steps = {
        "gen": ["gen"],
        "csp": ["csp"],
        "sft1": ["train", "sft1"],
        "sft2": ["train", "sft2"],
        "grpo": ["train", "grpo"],
        "eval_sft2": ["eval", "--checkpoint", str(root / "checkpoints/sft2.ckpt")],
        "eval_grpo": ["eval"],
    }
    start = time.perf_counter()
    codes = {name: main(argv + base) for name, argv in steps.items()}
    return PipelineRun(root, codes, time.perf_counter() - start)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="session")
def pipeline_rerun(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run_b"))


@pytest.fixture(scope="session")
def grpo_no_anchors(pipeline):
    """GRPO from the same SFT checkpoint with the anchor members switched off."""
    from negplan.cli import main

    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("NEGPLAN_GRPO__ANCHORS", "false")
        code = main(["train", "grpo", "--tag", "grpo-noanchor", "--out-dir", str(pipeline.root)])
    assert code == 0
    code = main(["eval", "--checkpoint", str(pipeline.root / "checkpoints/grpo-noanchor.ckpt"),
                 "--out-dir", str(pipeline.root)])
    assert code == 0
    return pipeline.root / "reports/eval-grpo-noanchor-summary.csv"


def read_summary(path: Path) -> dict:
    import csv

    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh))
    return {k: float(v) for k, v in row.items()}


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
