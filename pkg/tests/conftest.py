import sys
from pathlib import Path

import pytest
from hypothesis import settings

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def bundled():
    from pipestages.taxonomy import data_path, load_cross_mapping, load_taxonomy, unify

    a = load_taxonomy(data_path("dspipelines.yaml"))
    b = load_taxonomy(data_path("daswow.yaml"))
    mapping = load_cross_mapping(data_path("cross_mapping.yaml"), a, b)
    return a, b, unify(a, b, mapping)
