import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_polyline(rng, w, h, n_min=2, n_max=5):
    n = int(rng.integers(n_min, n_max + 1))
    pts = np.column_stack([rng.uniform(-4, w + 4, n), rng.uniform(-4, h + 4, n)])
    return pts


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
