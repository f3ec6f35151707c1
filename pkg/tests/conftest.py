import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from a3tta.data import SyntheticTask, default_domains, generate_domain  # noqa: E402
from a3tta.segmodel import ModelConfig, SegModel  # noqa: E402

SMALL_TASK = SyntheticTask(image_size=32)
SMALL_MODEL = ModelConfig(base_width=4, bottleneck_channels=4, image_size=32, dropout=0.1)


def small_model(seed=0, dtype=torch.float32, cfg=SMALL_MODEL):
    torch.manual_seed(seed)
    return SegModel(cfg).to(dtype)


def small_domain(name="target_a", n=12, seed=0):
    return generate_domain(SMALL_TASK, default_domains()[name], n, seed)


@pytest.fixture
def source():
    return small_model()


@pytest.fixture
def stream():
    return small_domain()


@pytest.fixture(scope="session")
def small_bench():
    from a3tta.data import build_benchmark
    return build_benchmark(SMALL_TASK, n_per_domain=20, n_train=60, n_val=20, seed=0)


@pytest.fixture(scope="session")
def trained_small(small_bench):
    from a3tta.training import pretrain_source
    model, _ = pretrain_source(small_bench["source_train"], small_bench["source_val"],
                               SMALL_MODEL, epochs=8, lr=3e-3, batch_size=10, seed=0)
    return model


# one verdict line per acceptance criterion, echoed at the end of the session
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])
