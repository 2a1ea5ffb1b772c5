import json
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from aft.kinematics import Bounds  # noqa: E402
from aft.reconstruct import PipelineParams  # noqa: E402
from aft.refmodel import build_reference_model  # noqa: E402
from aft.sim import RobotGeometry, generate_surface, reference_views, viewpoint_camera  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (criterion number, title, passed, detail) reported at the end of the run
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {title}: {detail}")


@pytest.fixture(scope="session")
def surface():
    return generate_surface(RobotGeometry(), seed=0)


@pytest.fixture(scope="session")
def base_model(surface):
    views = reference_views(surface, 5, 0.05, seed=1)
    return build_reference_model(surface.rest_points, views, surface.rest_config, 2000, 4, seed=0)


@pytest.fixture
def model(base_model):
    return base_model.copy()


@pytest.fixture(scope="session")
def front_camera():
    return viewpoint_camera("front")


@pytest.fixture(scope="session")
def params(surface):
    return PipelineParams(bounds=Bounds.around(surface.rest_config))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# reduced scenario for command-line runs: coarse surface, short sequences
SMALL_SCENARIO = {
    "name": "small",
    "seed": 11,
    "geometry": {"points_per_ring": 24, "rings_per_meter": 150},
    "trajectory": {"n_frames": 4, "n_sequences": 2},
    "pipeline": {"n_sample": 600},
    "sweep": {"n_seeds": 2, "n_frames": 3, "positions": [0.45], "widths": [0.0, 0.1],
              "viewpoints": ["front", "front-right", "front-left", "side-left"]},
    "control": {"n_targets": 2, "n_steps": 5},
}


@pytest.fixture
def small_scenario(tmp_path):
    """Writes ``SMALL_SCENARIO`` (optionally updated) and returns its path."""
    def write(name="scenario.json", **sections):
        data = json.loads(json.dumps(SMALL_SCENARIO))
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path
    return write
