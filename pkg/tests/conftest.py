import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_builder import build_fixture  # noqa: E402


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory) -> Path:
    """Two-video dataset with recorded chat responses, built once per session."""
    root = tmp_path_factory.mktemp("fixture")
    return build_fixture(root)


@pytest.fixture(scope="session")
def data_root(fixture_root) -> Path:
    return fixture_root / "data"


@pytest.fixture(scope="session")
def cassette_dir(fixture_root) -> Path:
    return fixture_root / "cassettes"
