import os

# one BLAS thread keeps timings honest and float results reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from topreid import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


QUICK = {
    "model": {"image_height": 16, "image_width": 8, "patch_size": 4, "embed_dim": 16, "depth": 1, "heads": 2},
    "optim": {"total_steps": 12, "warmup_steps": 3},
    "sampler": {"ids_per_batch": 2, "samples_per_id": 2},
    "data": {"num_ids": 4, "cams": 2, "samples_per_id_cam": 2},
}


@pytest.fixture
def quick_cfg():
    """A config that trains in well under a second."""
    from topreid.config import RunConfig

    return RunConfig().replace(**QUICK)


# -- acceptance verdicts -------------------------------------------------------
# test_acceptance.py records one line per criterion here; they are printed in
# the terminal summary so they survive output capture.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
