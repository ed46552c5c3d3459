import os
import re
import json
from dataclasses import dataclass, fields
from functools import lru_cache

from mdiag.constants import DEFAULT_LANGUAGE
from mdiag.data import Condition, OracleFact, PromptSetting, validate_for_setting
from mdiag.errors import ConfigError, PreconditionError
from mdiag.utils import digest_obj, get_resource_path

# Placeholders each template role must carry, exactly once each
TEMPLATE_PLACEHOLDERS = {
    "background_header": (),
    "knowledge_item_prefix_pattern": ("index",),
    "answer_instruction": ("question",),
    "strategy_block": ("conclusions",),
    "judge_template": ("generated_answer", "criteria"),
    "knowledge_qa_template": ("question",),
    "qa_synthesis_template": ("fact",),
    "sft_synthesis_template": ("chunk",),
}

SECTION_SEPARATOR = "\n\n"
ITEM_MARKER = "- "


@dataclass(frozen=True)
class PromptTemplateSet:
    language_tag: str
    background_header: str
    knowledge_item_prefix_pattern: str
    answer_instruction: str
    strategy_block: str
    judge_template: str
    knowledge_qa_template: str
    qa_synthesis_template: str
    sft_synthesis_template: str

    def __post_init__(self):
        for role, names in TEMPLATE_PLACEHOLDERS.items():
            template = getattr(self, role)
            for name in names:
                count = template.count("{" + name + "}")
                if count != 1:
                    raise ConfigError(
                        f"template '{role}' ({self.language_tag}) must contain "
                        f"{{{name}}} exactly once, found {count}"
                    )

    def roles(self):
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "language_tag"
        }

    def digest(self):
        return template_digest(self)


def template_digest(templates):
    """Digest over every template role; recorded in run manifests."""
    return digest_obj({"language_tag": templates.language_tag, **templates.roles()})


def default_manifest_path():
    return get_resource_path("mdiag", "templates/manifest.json")


def _read_template(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read template {path}: {e}") from e
    # Text editors end files with a newline that is not part of the template
    if text.endswith("\n"):
        text = text[:-1]
    return text


@lru_cache(maxsize=None)
def load_templates(language_tag=DEFAULT_LANGUAGE, manifest_path=None):
    """
    Load the template set for a language from a manifest.

    Args:
        language_tag (str): Key in the manifest, e.g. 'ja' or 'en'
        manifest_path (str): JSON file mapping role -> template path per language.
            Paths are relative to the manifest. Defaults to the packaged templates.

    Returns:
        PromptTemplateSet
    """
    manifest_path = manifest_path or default_manifest_path()
    if manifest_path is None or not os.path.exists(manifest_path):
        raise ConfigError(f"template manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"template manifest {manifest_path} is not valid JSON: {e}") from e

    if language_tag not in manifest:
        available = ", ".join(sorted(manifest)) or "none"
        raise ConfigError(
            f"no templates for language '{language_tag}' (available: {available})"
        )
    entry = manifest[language_tag]
    missing = [role for role in TEMPLATE_PLACEHOLDERS if role not in entry]
    if missing:
        raise ConfigError(
            f"template manifest lacks roles for '{language_tag}': {', '.join(missing)}"
        )

    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    roles = {
        role: _read_template(os.path.join(base_dir, entry[role]))
        for role in TEMPLATE_PLACEHOLDERS
    }
    return PromptTemplateSet(language_tag=language_tag, **roles)


def fill_template(template, **values):
    """Substitute named placeholders in a single pass.

    Inserted values are never scanned again, so a value that itself contains
    '{criteria}' stays verbatim.
    """
    if not values:
        return template
    pattern = re.compile(
        r"\{(" + "|".join(re.escape(name) for name in values) + r")\}"
    )
    return pattern.sub(lambda m: values[m.group(1)], template)


@lru_cache(maxsize=64)
def _template_pattern(template):
    parts = re.split(r"\{(\w+)\}", template)
    pattern = ""
    seen = set()
    for index, part in enumerate(parts):
        if index % 2 == 0:
            pattern += re.escape(part)
        elif part in seen:
            pattern += f"(?P={part})"
        else:
            seen.add(part)
            pattern += f"(?P<{part}>.*)"
    return re.compile(pattern, flags=re.DOTALL)


def match_template(template, prompt):
    """Inverse of fill_template: recover placeholder values from a filled prompt.

    Returns a dict of values, or None when the prompt was not built from the template.
    """
    m = _template_pattern(template).fullmatch(prompt)
    return m.groupdict() if m else None


def _itemize(conclusions):
    return "\n".join(ITEM_MARKER + c.text for c in conclusions)


def _require_text(value, what):
    if not isinstance(value, str) or not value.strip():
        raise PreconditionError(f"{what} must be non-empty")


def build_answer_prompt(item, setting, templates):
    setting = PromptSetting.parse(setting)
    check = validate_for_setting(item, setting)
    if not check.valid:
        raise PreconditionError(
            f"item '{item.id}' cannot run {setting.value}: {'; '.join(check.reasons)}"
        )

    question_block = fill_template(templates.answer_instruction, question=item.question)
    if setting is PromptSetting.NO_ORACLE:
        return question_block

    sections = []
    if setting is PromptSetting.ORACLE_ELICITATION:
        sections.append(templates.background_header)
        for index, fact in enumerate(item.oracle_facts, start=1):
            prefix = fill_template(
                templates.knowledge_item_prefix_pattern, index=str(index)
            )
            sections.append(f"{prefix}\n{fact.text}")
        sections.append(question_block)
    else:
        background = [c for c in item.oracle_conclusions if not c.is_guidance]
        guidance = [c for c in item.oracle_conclusions if c.is_guidance]
        sections.append(templates.background_header)
        if background:
            sections.append(_itemize(background))
        sections.append(question_block)
        if guidance:
            sections.append(
                fill_template(templates.strategy_block, conclusions=_itemize(guidance))
            )
    return SECTION_SEPARATOR.join(sections)


def build_judge_prompt(generated_answer, condition, templates):
    criteria = condition.text if isinstance(condition, Condition) else condition
    _require_text(generated_answer, "generated answer")
    _require_text(criteria, "condition text")
    return fill_template(
        templates.judge_template, generated_answer=generated_answer, criteria=criteria
    )


def build_knowledge_qa_prompt(question, templates):
    _require_text(question, "question")
    return fill_template(templates.knowledge_qa_template, question=question)


def build_qa_synthesis_prompt(fact, templates):
    text = fact.text if isinstance(fact, OracleFact) else fact
    _require_text(text, "fact text")
    return fill_template(templates.qa_synthesis_template, fact=text)


def build_sft_synthesis_prompt(chunk, templates):
    _require_text(chunk, "chunk")
    return fill_template(templates.sft_synthesis_template, chunk=chunk)
