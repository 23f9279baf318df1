"""Shared fixtures: a small synthetic world and a trained data directory.

Session-scoped because training 15 pairings takes a few seconds; tests that
mutate state copy the directory first.
"""

import pytest

from trendgen.catalog import append_outfit, product_to_record
from trendgen.evaluator import OracleConfig, curate_outfits, synth_catalog
from trendgen.service import ServiceState

_criterion_lines = []


@pytest.fixture(scope="session")
def criterion():
    """Collector for acceptance-criterion result lines; printed at the end."""
    return _criterion_lines.append


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def service_world():
    cfg = OracleConfig(n_products=220, seed=9, curated_outfits=400)
    catalog, oracle = synth_catalog(cfg.n_products, cfg.seed, cfg)
    outfits = curate_outfits(catalog, oracle, cfg.curated_outfits, seed=9)
    return cfg, catalog, oracle, outfits


@pytest.fixture(scope="session")
def trained_dir(service_world, tmp_path_factory):
    """Data directory holding a catalog, approved outfits, and trained models."""
    _, catalog, _, outfits = service_world
    root = tmp_path_factory.mktemp("trained")
    state = ServiceState(data_dir=root, seed=9)
    state.ingest([product_to_record(p) for p in catalog])
    for o in outfits:
        state.outfits[o.outfit_id] = o
        append_outfit(o, root / "outfits.jsonl")
    state.train(epochs=2, learning_rate=3e-4)
    return root
