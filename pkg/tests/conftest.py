import numpy as np
import pytest
import torch

from divsal.data import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_samples():
    spec = SyntheticSpec(num_images=8, canvas=64, objects_per_image=(2, 2), salience_probs=(1.0, 0.6), seed=3)
    samples, _ = generate_synthetic(spec)
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, title, msg = mod.RESULTS[n]
        terminalreporter.write_line(f"{n}. {'PASS' if ok else 'FAIL'}  {title}: {msg}")
