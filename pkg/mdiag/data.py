"""Evaluation data model: items, checklists, oracle material and knowledge QAs.

Datasets are stored one JSON record per line. An optional first record
``{"__metadata__": {...}}`` carries free-form metadata; every other record is
one EvalItem. Knowledge QAs live in a sibling ``<stem>.knowledge.jsonl`` file.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum

from mdiag.constants import CURATION_STATUSES, KNOWLEDGE_QA_SUFFIX, METADATA_KEY
from mdiag.errors import DatasetError, DuplicateIdError
from mdiag.utils import digest_obj, write_text_atomic

logger = logging.getLogger(__name__)


class PromptSetting(str, Enum):
    """Which oracle material is injected into the answer prompt."""

    NO_ORACLE = "no-oracle"
    ORACLE_ELICITATION = "oracle-elicitation"
    ORACLE_REASONING = "oracle-reasoning"

    @classmethod
    def parse(cls, value):
        value = value.strip().lower().replace("_", "-")
        for setting in cls:
            if value in (setting.value, setting.name.lower().replace("_", "-")):
                return setting
        raise ValueError(
            f"unknown prompt setting '{value}' "
            f"(expected one of {', '.join(s.value for s in cls)})"
        )


# Evaluation order, least oracle material first
SETTING_ORDER = (
    PromptSetting.NO_ORACLE,
    PromptSetting.ORACLE_ELICITATION,
    PromptSetting.ORACLE_REASONING,
)


@dataclass(frozen=True)
class Condition:
    id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"condition '{self.id}' has empty text")


@dataclass(frozen=True)
class Checklist:
    id: str
    conditions: tuple

    def __post_init__(self):
        if not self.conditions:
            raise ValueError(f"checklist '{self.id}' has no conditions")
        ids = [c.id for c in self.conditions]
        if len(set(ids)) != len(ids):
            raise ValueError(f"checklist '{self.id}' repeats a condition id")


@dataclass(frozen=True)
class OracleConclusion:
    text: str
    is_guidance: bool = False

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("oracle conclusion has empty text")


def join_section_title(section_title, text):
    """Prefix text with its section title and a line break, never twice."""
    if not section_title:
        return text
    prefix = f"{section_title}\n"
    if text.startswith(prefix):
        return text
    return prefix + text


@dataclass(frozen=True)
class OracleFact:
    id: str
    text: str
    section_title: str = None
    mandatory: bool = False

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"oracle fact '{self.id}' has empty text")


@dataclass(frozen=True)
class EvalItem:
    id: str
    question: str
    checklists: tuple
    oracle_conclusions: tuple = ()
    oracle_facts: tuple = ()

    def conditions(self):
        for checklist in self.checklists:
            for condition in checklist.conditions:
                yield checklist, condition


@dataclass(frozen=True)
class KnowledgeQA:
    id: str
    source_fact_id: str
    question: str
    answer: str
    curation_status: str = "pending"
    raw_output: str = None

    def __post_init__(self):
        if self.curation_status not in CURATION_STATUSES:
            raise ValueError(f"unknown curation status '{self.curation_status}'")
        # Unparseable synthesis output is kept, deleted, for inspection
        if self.curation_status != "deleted" and not self.answer.strip():
            raise ValueError(f"knowledge QA '{self.id}' has an empty answer")


@dataclass(frozen=True)
class Dataset:
    items: tuple = ()
    knowledge_qas: tuple = ()
    metadata: dict = field(default_factory=dict)

    def item(self, item_id):
        for item in self.items:
            if item.id == item_id:
                return item
        raise KeyError(item_id)

    def facts(self):
        return [fact for item in self.items for fact in item.oracle_facts]


@dataclass(frozen=True)
class DatasetStats:
    n_items: int
    avg_checklists_per_item: float
    avg_conditions_per_checklist: float
    avg_facts_per_item: float
    mandatory_fact_ratio: float
    n_knowledge_qas: int

    def rounded(self):
        """Averages at one decimal, the ratio at two."""
        return DatasetStats(
            n_items=self.n_items,
            avg_checklists_per_item=round(self.avg_checklists_per_item, 1),
            avg_conditions_per_checklist=round(self.avg_conditions_per_checklist, 1),
            avg_facts_per_item=round(self.avg_facts_per_item, 1),
            mandatory_fact_ratio=round(self.mandatory_fact_ratio, 2),
            n_knowledge_qas=self.n_knowledge_qas,
        )


@dataclass(frozen=True)
class ValidationResult:
    item_id: str
    setting: PromptSetting
    reasons: tuple = ()

    @property
    def valid(self):
        return not self.reasons


# ---------------------------------------------------------------------------
# Record parsing
# ---------------------------------------------------------------------------


def _type_name(expected):
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected)
    return expected.__name__


def _require(record, key, line, expected=str):
    if not isinstance(record, dict):
        raise DatasetError("expected an object", line=line, field=key)
    if key not in record:
        raise DatasetError("missing required field", line=line, field=key)
    value = record[key]
    if not isinstance(value, expected):
        raise DatasetError(
            f"expected {_type_name(expected)}, got {type(value).__name__}",
            line=line,
            field=key,
        )
    return value


def _build(factory, line, field_name, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise DatasetError(str(e), line=line, field=field_name) from e


def item_from_record(record, line=None):
    if not isinstance(record, dict):
        raise DatasetError("record is not an object", line=line)
    item_id = _require(record, "id", line)
    if not item_id:
        raise DatasetError("empty id", line=line, field="id")
    question = _require(record, "question", line)

    checklists = []
    for ci, raw_checklist in enumerate(_require(record, "checklists", line, list)):
        where = f"checklists[{ci}]"
        if not isinstance(raw_checklist, dict):
            raise DatasetError("checklist is not an object", line=line, field=where)
        conditions = []
        for ki, raw_condition in enumerate(
            _require(raw_checklist, "conditions", line, list)
        ):
            cwhere = f"{where}.conditions[{ki}]"
            if not isinstance(raw_condition, dict):
                raise DatasetError("condition is not an object", line=line, field=cwhere)
            conditions.append(
                _build(
                    Condition,
                    line,
                    cwhere,
                    id=str(_require(raw_condition, "id", line, (str, int))),
                    text=_require(raw_condition, "text", line),
                )
            )
        checklists.append(
            _build(
                Checklist,
                line,
                where,
                id=str(_require(raw_checklist, "id", line, (str, int))),
                conditions=tuple(conditions),
            )
        )
    if not checklists:
        raise DatasetError("at least one checklist is required", line=line, field="checklists")
    checklist_ids = [c.id for c in checklists]
    if len(set(checklist_ids)) != len(checklist_ids):
        raise DatasetError("checklist ids repeat within the item", line=line, field="checklists")

    conclusions = tuple(
        _build(
            OracleConclusion,
            line,
            f"oracle_conclusions[{i}]",
            text=_require(raw, "text", line),
            is_guidance=bool(isinstance(raw, dict) and raw.get("is_guidance", False)),
        )
        for i, raw in enumerate(record.get("oracle_conclusions") or [])
    )

    facts = []
    for i, raw in enumerate(record.get("oracle_facts") or [], start=1):
        if not isinstance(raw, dict):
            raise DatasetError("fact is not an object", line=line, field=f"oracle_facts[{i - 1}]")
        title = raw.get("section_title") or None
        facts.append(
            _build(
                OracleFact,
                line,
                f"oracle_facts[{i - 1}]",
                id=str(raw.get("id") or f"{item_id}/fact-{i}"),
                text=join_section_title(title, _require(raw, "text", line)),
                section_title=title,
                mandatory=bool(raw.get("mandatory", False)),
            )
        )

    return EvalItem(
        id=item_id,
        question=question,
        checklists=tuple(checklists),
        oracle_conclusions=conclusions,
        oracle_facts=tuple(facts),
    )


def item_to_record(item):
    return {
        "id": item.id,
        "question": item.question,
        "checklists": [
            {
                "id": checklist.id,
                "conditions": [{"id": c.id, "text": c.text} for c in checklist.conditions],
            }
            for checklist in item.checklists
        ],
        "oracle_conclusions": [
            {"text": c.text, "is_guidance": c.is_guidance} for c in item.oracle_conclusions
        ],
        "oracle_facts": [
            {
                "id": f.id,
                "text": f.text,
                **({"section_title": f.section_title} if f.section_title else {}),
                "mandatory": f.mandatory,
            }
            for f in item.oracle_facts
        ],
    }


def qa_from_record(record, line=None):
    if not isinstance(record, dict):
        raise DatasetError("record is not an object", line=line)
    try:
        return KnowledgeQA(
            id=str(_require(record, "id", line, (str, int))),
            source_fact_id=str(_require(record, "source_fact_id", line, (str, int))),
            question=_require(record, "question", line),
            answer=_require(record, "answer", line),
            curation_status=record.get("curation_status", "pending"),
            raw_output=record.get("raw_output"),
        )
    except ValueError as e:
        raise DatasetError(str(e), line=line) from e


def qa_to_record(qa):
    record = {
        "id": qa.id,
        "source_fact_id": qa.source_fact_id,
        "question": qa.question,
        "answer": qa.answer,
        "curation_status": qa.curation_status,
    }
    if qa.raw_output is not None:
        record["raw_output"] = qa.raw_output
    return record


def _iter_records(path):
    with open(path, "r", encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_num, json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON ({e.msg})", line=line_num) from e


# ---------------------------------------------------------------------------
# Loading / saving
# ---------------------------------------------------------------------------


def default_qa_path(dataset_path):
    stem, _ = os.path.splitext(dataset_path)
    return stem + KNOWLEDGE_QA_SUFFIX


def load_knowledge_qas(path):
    qas = []
    seen = set()
    for line_num, record in _iter_records(path):
        qa = qa_from_record(record, line=line_num)
        if qa.id in seen:
            raise DuplicateIdError("knowledge QA", qa.id, line=line_num)
        seen.add(qa.id)
        qas.append(qa)
    return tuple(qas)


def save_knowledge_qas(qas, path):
    lines = [json.dumps(qa_to_record(qa), ensure_ascii=False) for qa in qas]
    write_text_atomic(path, "".join(line + "\n" for line in lines))


def load_dataset(path, qa_path=None):
    """
    Load and validate a dataset file.

    Args:
        path: Line-delimited dataset file
        qa_path: Knowledge QA file; defaults to the sibling ``.knowledge.jsonl``
            file, which is optional

    Returns:
        Dataset

    Raises:
        DatasetError: malformed record, missing field or duplicate id
    """
    if not os.path.exists(path):
        raise DatasetError(f"dataset file not found: {path}")

    items = []
    metadata = {}
    seen = set()
    for line_num, record in _iter_records(path):
        if isinstance(record, dict) and METADATA_KEY in record:
            if items or metadata:
                raise DatasetError(
                    "metadata record must come first", line=line_num, field=METADATA_KEY
                )
            metadata = dict(record[METADATA_KEY] or {})
            continue
        item = item_from_record(record, line=line_num)
        if item.id in seen:
            raise DuplicateIdError("item", item.id, line=line_num)
        seen.add(item.id)
        items.append(item)

    if not items:
        logger.warning(f"Dataset {path} contains no items")

    if qa_path is None:
        candidate = default_qa_path(path)
        qa_path = candidate if os.path.exists(candidate) else None
    knowledge_qas = load_knowledge_qas(qa_path) if qa_path else ()

    logger.debug(f"Loaded {len(items)} items and {len(knowledge_qas)} knowledge QAs from {path}")
    return Dataset(items=tuple(items), knowledge_qas=knowledge_qas, metadata=metadata)


def save_dataset(ds, path, qa_path=None):
    lines = []
    if ds.metadata:
        lines.append(json.dumps({METADATA_KEY: ds.metadata}, ensure_ascii=False, sort_keys=True))
    lines.extend(json.dumps(item_to_record(item), ensure_ascii=False) for item in ds.items)
    write_text_atomic(path, "".join(line + "\n" for line in lines))
    if ds.knowledge_qas:
        save_knowledge_qas(ds.knowledge_qas, qa_path or default_qa_path(path))


def dataset_digest(ds):
    """Content digest over the evaluation items; independent of file layout."""
    return digest_obj([item_to_record(item) for item in ds.items])


# ---------------------------------------------------------------------------
# Statistics / validation
# ---------------------------------------------------------------------------


def dataset_stats(ds):
    n_items = len(ds.items)
    n_checklists = sum(len(item.checklists) for item in ds.items)
    n_conditions = sum(len(c.conditions) for item in ds.items for c in item.checklists)
    facts = ds.facts()
    n_mandatory = sum(1 for fact in facts if fact.mandatory)
    return DatasetStats(
        n_items=n_items,
        avg_checklists_per_item=n_checklists / n_items if n_items else 0.0,
        avg_conditions_per_checklist=n_conditions / n_checklists if n_checklists else 0.0,
        avg_facts_per_item=len(facts) / n_items if n_items else 0.0,
        mandatory_fact_ratio=n_mandatory / len(facts) if facts else 0.0,
        n_knowledge_qas=len(ds.knowledge_qas),
    )


def validate_for_setting(item, setting):
    reasons = []
    if setting == PromptSetting.ORACLE_ELICITATION and not item.oracle_facts:
        reasons.append("no oracle facts")
    elif setting == PromptSetting.ORACLE_REASONING and not item.oracle_conclusions:
        reasons.append("no oracle conclusions")
    return ValidationResult(item_id=item.id, setting=setting, reasons=tuple(reasons))
