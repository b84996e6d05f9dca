import pytest
import torch

from manetlab.datagen import generate_dataset


@pytest.fixture(autouse=True)
def _float32_default():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)


@pytest.fixture(scope="session")
def tiny_dataset():
    """8 identities x 4 images, one held out per identity."""
    return generate_dataset(seed=3, num_ids=8, images_per_id=4, holdout_per_id=1)


@pytest.fixture(scope="session")
def toy_dataset():
    """The 32 x 8 acceptance dataset."""
    return generate_dataset(seed=0, num_ids=32, images_per_id=8)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
