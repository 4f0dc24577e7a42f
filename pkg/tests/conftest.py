import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes tests/oracles.py importable

from fundlink.doctree import parse_opportunity_html

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def fixture_docs():
    """All bundled opportunity fixtures, parsed once."""
    docs = {}
    for path in sorted((FIXTURES / "html").glob("*.html")):
        docs[path.stem] = parse_opportunity_html(
            path.read_text(encoding="utf-8"), path.stem)
    return docs
