import numpy as np
import pytest
import torch

from adsvfd.geometry import WeightedPointCloud

torch.set_num_threads(1)


def random_cloud(rng, n, normals=False, weights="random"):
    pts = rng.random((n, 3))
    w = rng.random(n) + 0.1 if weights == "random" else np.ones(n)
    nr = None
    if normals:
        nr = rng.standard_normal((n, 3))
        nr /= np.linalg.norm(nr, axis=1, keepdims=True)
    return WeightedPointCloud(pts, w / w.sum(), nr)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def report_criterion(cid, ok, detail):
    """Record and print one acceptance line."""
    line = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
