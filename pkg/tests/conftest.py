import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xdex.pose_model import default_skeleton  # noqa: E402
from xdex.robot_hand import fixture_path, load_hand  # noqa: E402


@pytest.fixture(scope="session")
def four():
    return load_hand(fixture_path("four_finger"))


@pytest.fixture(scope="session")
def five():
    return load_hand(fixture_path("five_finger"))


@pytest.fixture(scope="session", params=["four_finger", "five_finger"])
def hand(request):
    return load_hand(fixture_path(request.param))


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def interior(model, rng, margin=0.05):
    span = model.upper - model.lower
    return rng.uniform(model.lower + margin * span, model.upper - margin * span)


@pytest.fixture(scope="session")
def trained_four(four):
    """Default-recipe surrogate for the 4-finger hand on 50,000 labeled poses (slow)."""
    import time

    from xdex.eigengrasp import synthetic_poses
    from xdex.surrogate import TrainRecipe, generate_training_set, train

    t0 = time.perf_counter()
    poses = synthetic_poses(50_000, rank=10, seed=0)
    dataset = generate_training_set(four, poses)
    t1 = time.perf_counter()
    result = train(dataset, TrainRecipe(), seed=0)
    t2 = time.perf_counter()
    return {"model": four, "poses": poses, "dataset": dataset, "result": result,
            "label_s": t1 - t0, "train_s": t2 - t1}


ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def record():
    """Store one acceptance verdict: record(number, title, ok, detail)."""

    def _record(number: int, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), title, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})")
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
