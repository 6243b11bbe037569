from pathlib import Path

import pytest
import torch

from occloff.config import load_config

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.yaml"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(TINY)


@pytest.fixture(scope="session")
def tiny_config_path():
    return TINY


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    """8 train + 4 val sequences at the tiny scale."""
    from occloff.cli import dataset_specs
    from occloff.synthdata import write_dataset

    out = tmp_path_factory.mktemp("tiny_data")
    specs, splits = dataset_specs(tiny_cfg)
    write_dataset(out, specs, splits)
    return out


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_cfg, tiny_data):
    from occloff.trainer import train

    out = tmp_path_factory.mktemp("tiny_run")
    return out, train(tiny_data, tiny_cfg, out)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def emit(criterion: int, title: str, passed: bool, detail: str):
        line = f"[{criterion:>2}] {'PASS' if passed else 'FAIL'} {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
