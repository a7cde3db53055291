import pytest

from ssnerf.dataset import load_dataset
from ssnerf.scene import builtin_scene, gen_dataset

# a network and sampling budget small enough for multi-step runs inside unit tests
TINY = dict(batch_rays=64, chunk_rays=32, n_coarse=8, n_fine=8, pos_freqs=3, dir_freqs=2, trunk_depth=2,
            trunk_width=16, skip=None, head_width=8, lr=5e-3)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    return gen_dataset(builtin_scene("toy"), 10, 0, tmp_path_factory.mktemp("tiny"), width=16, height=16, steps=512)


@pytest.fixture(scope="session")
def tiny_data(tiny_root):
    return load_dataset(tiny_root)


ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
