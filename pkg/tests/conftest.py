"""Shared fixtures: isolated user directories, English templates, scripted backends."""

import os

import pytest

from mdiag.data import Checklist, Condition, EvalItem, OracleConclusion, OracleFact, load_dataset
from mdiag.gateway import BackendConfig, Gateway, ScriptedBackend
from mdiag.oracle_eval import RunConfig
from mdiag.prompts import load_templates
from mdiag.simulator import CapabilitySpec, SimConfig, SimulatedModel, generate_sim_dataset

TESTS_DIR = os.path.dirname(os.path.abspath(__file__))
FIXTURES_DIR = os.path.join(TESTS_DIR, "fixtures")
GOLDEN_DIR = os.path.join(TESTS_DIR, "golden")


def fixture_path(name):
    return os.path.join(FIXTURES_DIR, name)


def read_golden(name):
    with open(os.path.join(GOLDEN_DIR, name), "r", encoding="utf-8") as f:
        text = f.read()
    return text[:-1] if text.endswith("\n") else text


@pytest.fixture(autouse=True)
def _isolated_user_dirs(tmp_path, monkeypatch):
    """Keep every test away from the real user config, cache and credentials."""
    home = tmp_path / "home"
    home.mkdir()
    monkeypatch.setenv("HOME", str(home))
    monkeypatch.setenv("XDG_CONFIG_HOME", str(home / ".config"))
    monkeypatch.setenv("XDG_CACHE_HOME", str(home / ".cache"))
    monkeypatch.delenv("MDIAG_API_KEY", raising=False)
    monkeypatch.delenv("MDIAG_BASE_URL", raising=False)

    config_path = str(home / "mdiag-config.json")
    cache_root = home / "mdiag-cache"

    def cache_path(folder=None):
        path = cache_root / folder if folder else cache_root
        path.mkdir(parents=True, exist_ok=True)
        return str(path)

    monkeypatch.setattr("mdiag.config.get_user_config_path", lambda: config_path)
    monkeypatch.setattr("mdiag.config.get_user_cache_path", cache_path)


@pytest.fixture
def templates():
    return load_templates("en")


@pytest.fixture
def profile_dataset():
    return load_dataset(fixture_path("support_profile.jsonl"))


@pytest.fixture
def prompt_items():
    ds = load_dataset(fixture_path("prompt_items.jsonl"))
    return {item.id: item for item in ds.items}


@pytest.fixture
def two_checklist_item():
    """Checklists A={c1, c2} and B={c3}."""
    return EvalItem(
        id="q1",
        question="Which parameters control job retries?",
        checklists=(
            Checklist("A", (Condition("c1", "Names RETRY_WINDOW."), Condition("c2", "Names QUEUE_DEPTH."))),
            Checklist("B", (Condition("c3", "Names AGENT_POOL."),)),
        ),
        oracle_conclusions=(OracleConclusion("Retries are governed by RETRY_WINDOW."),),
        oracle_facts=(OracleFact("q1/fact-1", "RETRY_WINDOW sets the retry interval.", mandatory=True),),
    )


@pytest.fixture
def fast_run_config():
    return RunConfig(seeds=tuple(range(10)), answer_model="answerer", judge_model="judge")


def make_gateway(backend, max_in_flight=4, retry_limit=2, cache_dir=None):
    config = BackendConfig(max_in_flight=max_in_flight, retry_limit=retry_limit, cache_dir=cache_dir)
    return Gateway(backend, config, sleep=lambda _: None)


@pytest.fixture
def scripted_gateway():
    """Gateway factory over ScriptedBackend keyword arguments."""
    gateways = []

    def factory(**kwargs):
        gateway = make_gateway(ScriptedBackend(**kwargs))
        gateways.append(gateway)
        return gateway

    yield factory
    for gateway in gateways:
        gateway.close()


def sim_setup(spec, n_items=20, hops=2, templates_=None):
    """Simulator dataset plus a gateway over the simulated model."""
    ds = generate_sim_dataset(SimConfig(n_items=n_items, hops=hops))
    templates_ = templates_ or load_templates("en")
    model = SimulatedModel(ds, CapabilitySpec(*spec), templates_)
    return ds, make_gateway(model.backend(), max_in_flight=8)
