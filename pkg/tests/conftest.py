import pytest

from caam.data import DatasetSpec, generate_dataset


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(image_size=32, n_train=400, n_val=100, n_iid_test=100, n_ood_test=200, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(
        num_object_classes=4, num_contexts=5, contexts_seen_per_class=3, image_size=16,
        n_train=64, n_val=16, n_iid_test=16, n_ood_test=32, seed=1,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate_dataset(tiny_spec)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
