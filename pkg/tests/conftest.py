import numpy as np
import pytest

from graphshift.attack import monitor
from graphshift.graphs import SyntheticSpec, generate_synthetic

# Two graphs in TU text format: a triangle (label 1) and a single edge (label 2).
TWO_GRAPH_FILES = {
    "A": "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n",
    "graph_indicator": "1\n1\n1\n2\n2\n",
    "graph_labels": "1\n2\n",
}


def write_tu(directory, name: str, files: dict[str, str]):
    directory.mkdir(parents=True, exist_ok=True)
    for key, text in files.items():
        (directory / f"{name}_{key}.txt").write_text(text)
    return directory


@pytest.fixture
def two_graph_dir(tmp_path):
    return write_tu(tmp_path / "TWO", "TWO", TWO_GRAPH_FILES)


@pytest.fixture
def fresh_monitor():
    monitor.reset()
    yield monitor
    monitor.reset()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(graphs_per_class=30, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
