"""
Layered harness configuration.

Layers, lowest first: built-in defaults, the user config file, an explicit
``--config`` document, environment variables, command-line flags. Secrets are
read from the environment only.
"""

import copy
import logging
import os
from dataclasses import dataclass, field

from mdiag.constants import (
    API_KEY_ENV,
    BASE_URL_ENV,
    DEFAULT_BASE_URL,
    DEFAULT_LANGUAGE,
    DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_RETRY_LIMIT,
    DEFAULT_TIMEOUT,
)
from mdiag.errors import ConfigError
from mdiag.gateway import BackendConfig
from mdiag.oracle_eval import RunConfig
from mdiag.utils import get_user_cache_path, get_user_config_path, load_config

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("openai", "scripted", "scripted-logprob", "scripted-table")

DEFAULTS = {
    "backend": {
        "kind": "openai",
        "base_url": DEFAULT_BASE_URL,
        "max_in_flight": DEFAULT_MAX_IN_FLIGHT,
        "retry_limit": DEFAULT_RETRY_LIMIT,
        "timeout": DEFAULT_TIMEOUT,
        "cache": True,
        "cache_dir": None,
        "spec": None,
    },
    "run": RunConfig().to_dict(),
    "language": DEFAULT_LANGUAGE,
    "templates_manifest": None,
    "dataset": None,
    "knowledge_qas": None,
    "output_dir": None,
    "knowledge": {"model": None, "synth_model": None},
}


def merge_documents(base, override):
    """Recursive dict merge; None values in the override leave the base alone."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_documents(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _reject_secrets(document, source):
    backend = document.get("backend") or {}
    if "api_key" in document or "api_key" in backend:
        raise ConfigError(
            f"{source} contains an api_key; provide it through {API_KEY_ENV} instead"
        )


def parse_backend_kind(text):
    """Split 'scripted-logprob=-0.69' style values into (kind, argument)."""
    kind, _, argument = text.partition("=")
    if kind not in BACKEND_KINDS:
        raise ConfigError(f"unknown backend '{kind}' (expected one of {', '.join(BACKEND_KINDS)})")
    if kind in ("scripted-logprob", "scripted-table") and not argument:
        raise ConfigError(f"backend '{kind}' needs a value, e.g. {kind}=...")
    return kind, argument or None


@dataclass
class HarnessConfig:
    backend: BackendConfig
    run: RunConfig
    backend_kind: str = "openai"
    backend_argument: str = None
    capability_spec: str = None
    language: str = DEFAULT_LANGUAGE
    templates_manifest: str = None
    dataset_path: str = None
    qa_path: str = None
    output_dir: str = None
    knowledge_model: str = None
    synth_model: str = None
    document: dict = field(default_factory=dict, repr=False)

    @property
    def is_scripted(self):
        return self.backend_kind != "openai"

    def to_public_dict(self):
        """Resolved configuration without secrets; copied into run directories."""
        return {
            "backend": {
                "kind": self.backend_kind,
                "argument": self.backend_argument,
                "spec": self.capability_spec,
                **self.backend.to_public_dict(),
            },
            "run": self.run.to_dict(),
            "language": self.language,
            "templates_manifest": self.templates_manifest,
            "dataset": self.dataset_path,
            "knowledge_qas": self.qa_path,
            "output_dir": self.output_dir,
            "knowledge": {"model": self.knowledge_model, "synth_model": self.synth_model},
        }


def load_harness_config(overrides=None, config_path=None, user_config_path=None, environ=None):
    """
    Resolve the configuration layers into a HarnessConfig.

    Args:
        overrides: document built from command-line flags (highest priority)
        config_path: explicit JSON config document
        user_config_path: user config file; the platform default when None
        environ: environment mapping; os.environ when None
    """
    environ = os.environ if environ is None else environ
    document = copy.deepcopy(DEFAULTS)

    user_config_path = user_config_path or get_user_config_path()
    try:
        user_document = load_config(user_config_path)
    except ValueError as e:
        raise ConfigError(f"user config file {user_config_path} is not valid JSON: {e}") from e
    if not isinstance(user_document, dict):
        raise ConfigError("user config file must hold a JSON object")
    _reject_secrets(user_document, "user config file")
    document = merge_documents(document, user_document)

    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        try:
            explicit = load_config(config_path)
        except ValueError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(explicit, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        _reject_secrets(explicit, config_path)
        document = merge_documents(document, explicit)

    if environ.get(BASE_URL_ENV):
        document["backend"]["base_url"] = environ[BASE_URL_ENV]
    document = merge_documents(document, overrides or {})

    b = document["backend"]
    kind, argument = parse_backend_kind(b["kind"])
    # Scripted responses depend on the simulator spec, not only on the prompt
    use_cache = b.get("cache", True) and kind == "openai"
    cache_dir = None
    if use_cache:
        cache_dir = b.get("cache_dir") or get_user_cache_path("responses")

    try:
        backend = BackendConfig(
            base_url=b["base_url"],
            api_key=environ.get(API_KEY_ENV),
            max_in_flight=int(b["max_in_flight"]),
            retry_limit=int(b["retry_limit"]),
            timeout=float(b["timeout"]),
            cache_dir=cache_dir,
        )
        run = RunConfig.from_dict(document["run"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e

    if kind == "scripted" and not b.get("spec"):
        raise ConfigError("the scripted backend needs a capability spec (--spec)")

    knowledge = document.get("knowledge") or {}
    config = HarnessConfig(
        backend=backend,
        run=run,
        backend_kind=kind,
        backend_argument=argument,
        capability_spec=b.get("spec"),
        language=document["language"],
        templates_manifest=document.get("templates_manifest"),
        dataset_path=document.get("dataset"),
        qa_path=document.get("knowledge_qas"),
        output_dir=document.get("output_dir"),
        knowledge_model=knowledge.get("model") or run.answer_model,
        synth_model=knowledge.get("synth_model") or run.judge_model,
        document=document,
    )
    logger.debug(f"Resolved configuration: {config.to_public_dict()}")
    return config
