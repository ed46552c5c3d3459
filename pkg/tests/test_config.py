import json

import pytest

from mdiag.config import load_harness_config, merge_documents, parse_backend_kind
from mdiag.errors import ConfigError


def write(path, document):
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


def test_defaults(tmp_path):
    config = load_harness_config(user_config_path=str(tmp_path / "absent.json"), environ={})
    assert config.backend_kind == "openai"
    assert config.backend.api_key is None
    assert config.backend.cache_dir is not None
    assert config.run.seeds == tuple(range(10))
    assert config.language == "ja"


def test_layers_in_priority_order(tmp_path):
    user = write(tmp_path / "user.json", {"backend": {"max_in_flight": 2, "retry_limit": 1}, "language": "en"})
    explicit = write(tmp_path / "run.json", {"backend": {"max_in_flight": 6}})
    config = load_harness_config(
        overrides={"backend": {"retry_limit": 9, "timeout": None}},
        config_path=explicit,
        user_config_path=user,
        environ={"MDIAG_BASE_URL": "http://gpu-box:8000/v1", "MDIAG_API_KEY": "sk-test"},
    )
    assert config.backend.max_in_flight == 6
    assert config.backend.retry_limit == 9
    assert config.backend.base_url == "http://gpu-box:8000/v1"
    assert config.backend.api_key == "sk-test"
    assert config.language == "en"


def test_public_dict_has_no_secret(tmp_path):
    config = load_harness_config(
        user_config_path=str(tmp_path / "absent.json"), environ={"MDIAG_API_KEY": "sk-test"}
    )
    assert "sk-test" not in json.dumps(config.to_public_dict())


@pytest.mark.parametrize("document", [{"api_key": "x"}, {"backend": {"api_key": "x"}}])
def test_secrets_in_files_are_rejected(tmp_path, document):
    with pytest.raises(ConfigError):
        load_harness_config(user_config_path=write(tmp_path / "user.json", document), environ={})
    with pytest.raises(ConfigError):
        load_harness_config(
            config_path=write(tmp_path / "run.json", document),
            user_config_path=str(tmp_path / "absent.json"),
            environ={},
        )


def test_invalid_documents(tmp_path):
    broken = tmp_path / "user.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_harness_config(user_config_path=str(broken), environ={})
    with pytest.raises(ConfigError):
        load_harness_config(config_path=str(tmp_path / "missing.json"), environ={})
    with pytest.raises(ConfigError):
        load_harness_config(overrides={"run": {"seeds": []}}, environ={})


def test_scripted_backends(tmp_path):
    with pytest.raises(ConfigError):
        load_harness_config(overrides={"backend": {"kind": "scripted"}}, environ={})
    config = load_harness_config(overrides={"backend": {"kind": "scripted", "spec": "1,1,1"}}, environ={})
    assert config.is_scripted
    assert config.backend.cache_dir is None


def test_cache_can_be_disabled():
    config = load_harness_config(overrides={"backend": {"cache": False}}, environ={})
    assert config.backend.cache_dir is None


def test_parse_backend_kind():
    assert parse_backend_kind("openai") == ("openai", None)
    assert parse_backend_kind("scripted-logprob=-0.69") == ("scripted-logprob", "-0.69")
    with pytest.raises(ConfigError):
        parse_backend_kind("scripted-logprob")
    with pytest.raises(ConfigError):
        parse_backend_kind("llama")


def test_merge_documents_is_recursive():
    base = {"backend": {"a": 1, "b": 2}, "language": "ja"}
    merged = merge_documents(base, {"backend": {"b": 3, "c": None}, "language": None})
    assert merged == {"backend": {"a": 1, "b": 3}, "language": "ja"}
    assert base["backend"]["b"] == 2
