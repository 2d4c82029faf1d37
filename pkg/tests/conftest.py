import numpy as np
import pytest

from streamfield.geometry import Camera, make_forward_facing_rig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def rig():
    return make_forward_facing_rig()


def random_camera(rng, cam_id="c", width=64, height=48):
    """A camera looking roughly at the unit cube from a random position."""
    from streamfield.geometry import look_at_extrinsics

    pos = np.array([0.5, 0.5, 0.5]) + rng.normal(size=3) * 0.3 + np.array([0.0, 0.0, -1.5])
    target = np.array([0.5, 0.5, 0.5]) + rng.normal(size=3) * 0.05
    f = rng.uniform(40, 80)
    K = np.array([[f, 0, width / 2 + rng.uniform(-3, 3)], [0, f * rng.uniform(0.9, 1.1), height / 2], [0, 0, 1]])
    return Camera(cam_id, width, height, K, look_at_extrinsics(pos, target), 0.5, 3.0)


_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    seen = []

    def record(cid, ok, detail):
        seen.append(cid)
        _VERDICTS.append(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{cid}: {detail}"

    yield record
    if not seen:
        _VERDICTS.append(f"{request.node.name} FAIL: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
