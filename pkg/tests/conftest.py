import numpy as np
import pytest
import torch

from congaze.synthface import SynthDatasetSpec, generate_dataset

torch.set_num_threads(1)

# desk-scale settings shared by the end-to-end tests
DESK_LR = 1e-3
DESK_ITERATIONS = 500


@pytest.fixture(scope="session")
def desk_dataset():
    """Default 4 subjects x 200 images at 64x64."""
    return generate_dataset(SynthDatasetSpec())


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SynthDatasetSpec(n_subjects=3, images_per_subject=24, master_seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criterion -> (passed, detail); printed in the terminal summary
ACCEPTANCE: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
