import numpy as np
import pytest

from ssl_transfer.datasets import DatasetManifest, Sample, SyntheticSpec, generate_synthetic_corpus


def make_manifest(grades, name="toy", num_grades=None):
    num_grades = num_grades or max(grades) + 1
    samples = tuple(Sample(f"s{k:04d}", f"images/s{k:04d}.png", int(g)) for k, g in enumerate(grades))
    return DatasetManifest(name, samples, num_grades)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_corpus(out, SyntheticSpec(2, 12, 32, seed=3))
    return out, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
