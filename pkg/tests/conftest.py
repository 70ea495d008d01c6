import pytest

from autoalign.scene import Dataset, generate_dataset


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    """50 default-config scenes (38 train / 12 eval) shared by the training tests."""
    root = tmp_path_factory.mktemp("micro_data")
    generate_dataset(root, 50, seed=5)
    return root


@pytest.fixture(scope="session")
def micro_dataset(micro_data):
    return Dataset(micro_data)


_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Store the one-line PASS/FAIL summary of an acceptance criterion."""
    def record(number, ok, detail):
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
