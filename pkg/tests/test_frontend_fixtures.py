"""The portal's test fixtures must stay byte-true to what the server serves.

The frontend suite replays these files through its view model; regenerating
them here through the real HTTP surface catches any drift between the two
components.
"""

from __future__ import annotations

import importlib.util
import json
import pathlib

import pytest

FRONTEND = pathlib.Path(__file__).resolve().parent.parent / "frontend"
FIXTURES = FRONTEND / "tests" / "fixtures"
GENERATOR = FRONTEND / "scripts" / "generate_fixtures.py"


@pytest.fixture(scope="module")
def regenerated(tmp_path_factory):
    # Run the generator with its output directory swapped to scratch space.
    target = tmp_path_factory.mktemp("fixtures")
    spec = importlib.util.spec_from_file_location("fixture_gen", GENERATOR)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    module.FIXTURES = target
    module.main()
    return target


@pytest.mark.skipif(not FIXTURES.exists(), reason="fixtures not generated")
class TestFixtureDrift:
    def test_csv_matches_server_output(self, regenerated):
        committed = (FIXTURES / "demo-results.csv").read_bytes()
        fresh = (regenerated / "demo-results.csv").read_bytes()
        assert committed == fresh

    def test_results_match_server_output(self, regenerated):
        committed = json.loads((FIXTURES / "demo-results.json").read_text())
        fresh = json.loads((regenerated / "demo-results.json").read_text())
        assert committed == fresh
        kinds = [r["kind"] for r in committed]
        assert kinds.count("PARTIAL") == 50 and kinds.count("FINAL") == 1

    def test_catalog_matches_server_output(self, regenerated):
        committed = json.loads((FIXTURES / "catalog.json").read_text())
        fresh = json.loads((regenerated / "catalog.json").read_text())
        assert committed == fresh
