import hypothesis
import numpy as np
import pytest

from kgaugment.clustering import ClusterConfig
from kgaugment.kg_embed import EmbeddingTable
from kgaugment.model import KgInputs

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow end-to-end checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def triple_file(tmp_path):
    path = tmp_path / "kg.tsv"
    path.write_text("a\tr\tb\nb\tr\tc\n", encoding="utf-8")
    return path


@pytest.fixture
def tiny_tables():
    generator = np.random.default_rng(11)
    entities = EmbeddingTable(generator.normal(size=(8, 4)), kind="entity", names=tuple(f"e{i}" for i in range(8)))
    relations = EmbeddingTable(generator.normal(size=(3, 4)), kind="relation", names=("r0", "r1", "r2"))
    return entities, relations


@pytest.fixture
def tiny_kg(tiny_tables):
    entities, relations = tiny_tables
    return KgInputs.build(entities, relations, ClusterConfig(clusters=2, restarts=2, seed=0))
