import os

# single-threaded BLAS keeps timings honest and results bitwise reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dcalgan.data import SynthSpec, generate_synthetic  # noqa: E402
from dcalgan.models import DiscLayer, GenStage, NetworkConfig, PoolSpec  # noqa: E402


def tiny_config(fusion_mode: str = "F2") -> NetworkConfig:
    """16x16 network with the same five-conv / three-pool layout as the presets."""
    pool = PoolSpec(3, 2, 1)
    return NetworkConfig(
        preset="tiny",
        image_size=16,
        proj_channels=8,
        gen_stages=(GenStage(4, 4, 2, 1), GenStage(1, 4, 2, 1)),
        disc_layers=(
            DiscLayer(4, 3, 1, (1, 1, 1, 1), pool, batchnorm=False),
            DiscLayer(6, 3, 1, (1, 1, 1, 1), pool),
            DiscLayer(6, 3, 1, (1, 1, 1, 1)),
            DiscLayer(6, 3, 1, (1, 1, 1, 1)),
            DiscLayer(4, 3, 1, (1, 1, 1, 1), pool),
        ),
        z_dim=8,
        fusion_mode=fusion_mode,
    )


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(SynthSpec(n_per_class=8, size=16, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[number] = (title, "PASS" if report.passed else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict, seconds = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title} ({seconds:.1f} s)")
