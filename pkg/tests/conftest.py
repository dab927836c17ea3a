import numpy as np
import pytest

from httn.backbone import Manifest, SynthSpec, synth_dataset


def make_split(first_class=0, classes=10, per_class=30, split="base", M=8, C=24, seed=None, sigma=0.1):
    """Synthetic temporal-order manifest plus in-memory features."""
    spec = SynthSpec(classes=classes, T=8, M=M, C=C, sigma=sigma, first_class=first_class)
    data = synth_dataset(spec, per_class, seed=first_class + 1 if seed is None else seed)
    manifest = Manifest(classes, split, [r for r, _ in data])
    return manifest, {r.sample_id: x for r, x in data}


@pytest.fixture(scope="session")
def toy_base():
    return make_split(0, split="base")


@pytest.fixture(scope="session")
def toy_novel():
    return make_split(10, split="novel")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in RESULTS:
            terminalreporter.write_line(line)
