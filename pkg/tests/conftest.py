import pytest

from tandem import minibench
from tandem.dataset import DbRegistry, load_dataset
from tandem.llm import ScriptBook


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """The bundled offline benchmark, materialized once per session."""
    out = tmp_path_factory.mktemp("bench")
    paths = minibench.build(out)
    return {
        "paths": paths,
        "questions": load_dataset(paths["dataset"]),
        "registry": DbRegistry.load(paths["registry"]),
        "script": ScriptBook.load(paths["script"]),
    }
