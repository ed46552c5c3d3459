"""Knowledge probes: memorization via paragraph perplexity and elicitation via
closed-book QA synthesized from oracle facts."""

import csv
import io
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from tqdm import tqdm

from mdiag.constants import (
    ANSWER_PUNCTUATION,
    CURATION_STATUSES,
    CURATION_TRANSITIONS,
    DEFAULT_KNOWLEDGE_MAX_TOKENS,
    DEFAULT_SYNTHESIS_MAX_TOKENS,
    EVALUABLE_STATUSES,
    RUN_FILES,
)
from mdiag.data import KnowledgeQA
from mdiag.errors import (
    BackendError,
    DatasetError,
    DatasetMismatchError,
    EvaluationError,
    PreconditionError,
    ScoringUnsupported,
)
from mdiag.gateway import DecodeMode, GenerationRequest
from mdiag.prompts import build_knowledge_qa_prompt, build_qa_synthesis_prompt
from mdiag.utils import read_json, round_floats, write_json, write_text_atomic

logger = logging.getLogger(__name__)

PERPLEXITY_UNSUPPORTED_NOTE = "perplexity skipped: the endpoint cannot score text"

_PARAGRAPH_BREAK = re.compile(r"\n\s*\n")
_QUESTION_MARKER = "### Question"
_ANSWER_MARKER = "### Answer"
_NEXT_HEADING = re.compile(r"^###", re.MULTILINE)
_PUNCTUATION_TABLE = str.maketrans("", "", "".join(sorted(ANSWER_PUNCTUATION)))


# ---------------------------------------------------------------------------
# Memorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerplexityRecord:
    fact_id: str
    paragraph_index: int
    token_count: int
    usable_logprob_count: int
    perplexity: float


@dataclass(frozen=True)
class PerplexitySkip:
    fact_id: str
    paragraph_index: int
    reason: str


@dataclass(frozen=True)
class MemorizationResult:
    model_id: str
    records: tuple
    skipped: tuple = ()

    @property
    def mean_perplexity(self):
        # Sorted so the mean does not depend on fact or paragraph order
        return float(np.mean(sorted(r.perplexity for r in self.records)))

    def per_fact_means(self):
        grouped = {}
        for record in self.records:
            grouped.setdefault(record.fact_id, []).append(record.perplexity)
        return {
            fact_id: float(np.mean(sorted(values)))
            for fact_id, values in sorted(grouped.items())
        }

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "mean_perplexity": self.mean_perplexity,
            "per_fact": self.per_fact_means(),
            "paragraphs": [asdict(r) for r in self.records],
            "skipped": [asdict(s) for s in self.skipped],
        }

    @classmethod
    def from_dict(cls, record):
        return cls(
            model_id=record["model_id"],
            records=tuple(PerplexityRecord(**r) for r in record["paragraphs"]),
            skipped=tuple(PerplexitySkip(**s) for s in record.get("skipped", [])),
        )


def split_paragraphs(fact_text):
    """Split on blank-line runs, trimming each paragraph and dropping empties."""
    parts = (p.strip() for p in _PARAGRAPH_BREAK.split(fact_text))
    return [p for p in parts if p]


def paragraph_perplexity(paragraph, model_id, gateway, fact_id="", paragraph_index=0):
    """
    exp(-mean logprob) over the usable token log-probabilities.

    Raises:
        ScoringUnsupported: endpoint cannot score, or returned no usable values
    """
    if not paragraph.strip():
        raise PreconditionError("cannot score an empty paragraph")
    scored = gateway.score_tokens(model_id, paragraph)
    usable = scored.usable
    if not usable:
        raise ScoringUnsupported("no usable log-probabilities returned")
    return PerplexityRecord(
        fact_id=fact_id,
        paragraph_index=paragraph_index,
        token_count=len(scored.tokens),
        usable_logprob_count=len(usable),
        perplexity=float(np.exp(-np.mean(np.asarray(usable, dtype=np.float64)))),
    )


def measure_memorization(facts, model_id, gateway, progress=False):
    """
    Per-paragraph perplexity of every fact; unscorable paragraphs are skipped.

    Raises:
        ScoringUnsupported: every paragraph failed because the endpoint cannot score
        EvaluationError: nothing could be scored for any other reason
    """
    jobs = [
        (fact.id, index, paragraph)
        for fact in facts
        for index, paragraph in enumerate(split_paragraphs(fact.text))
    ]
    records, skipped = [], []
    unsupported = 0
    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as executor:
        futures = {
            executor.submit(paragraph_perplexity, text, model_id, gateway, fact_id, index): (
                fact_id,
                index,
            )
            for fact_id, index, text in jobs
        }
        for future in tqdm(
            as_completed(futures), total=len(futures), desc="Scoring paragraphs", disable=not progress
        ):
            fact_id, index = futures[future]
            try:
                records.append(future.result())
            except BackendError as e:
                logger.warning(f"Skipping paragraph {index} of {fact_id}: {e}")
                skipped.append(PerplexitySkip(fact_id, index, str(e)))
                unsupported += isinstance(e, ScoringUnsupported)

    if not records:
        if skipped and unsupported == len(skipped):
            raise ScoringUnsupported(f"no paragraph could be scored ({len(skipped)} skipped)")
        raise EvaluationError(
            f"no paragraph could be scored ({len(skipped)} skipped)"
            if skipped
            else "no paragraphs to score"
        )
    order = lambda r: (r.fact_id, r.paragraph_index)  # noqa: E731
    return MemorizationResult(
        model_id=model_id,
        records=tuple(sorted(records, key=order)),
        skipped=tuple(sorted(skipped, key=order)),
    )


def memorization_score(facts, model_id, gateway):
    """Unweighted mean of paragraph perplexities across all facts."""
    return measure_memorization(facts, model_id, gateway).mean_perplexity


# ---------------------------------------------------------------------------
# Closed-book QA synthesis and curation
# ---------------------------------------------------------------------------


def parse_synthesized_qa(raw):
    """
    Extract (question, answer) from a synthesis output.

    Uses the last '### Answer' marker and the last '### Question' before it, so
    outputs that restate the instructions first still parse. Returns None
    when either part is missing or empty.
    """
    answer_at = raw.rfind(_ANSWER_MARKER)
    if answer_at < 0:
        return None
    question_at = raw.rfind(_QUESTION_MARKER, 0, answer_at)
    if question_at < 0:
        return None
    question = raw[question_at + len(_QUESTION_MARKER) : answer_at].strip()
    tail = raw[answer_at + len(_ANSWER_MARKER) :]
    next_heading = _NEXT_HEADING.search(tail)
    answer = (tail[: next_heading.start()] if next_heading else tail).strip()
    if not question or not answer:
        return None
    return question, answer


@dataclass(frozen=True)
class SynthesisResult:
    qas: tuple
    failed_fact_ids: tuple = ()

    @property
    def unparseable(self):
        return sum(1 for qa in self.qas if qa.curation_status == "deleted")


def qa_id_for(fact_id):
    return f"{fact_id}/qa"


def _synthesize_one(fact, synth_model_id, gateway, templates):
    request = GenerationRequest(
        model_id=synth_model_id,
        prompt=build_qa_synthesis_prompt(fact, templates),
        temperature=0.0,
        max_tokens=DEFAULT_SYNTHESIS_MAX_TOKENS,
        decode_mode=DecodeMode.GREEDY,
    )
    raw = gateway.generate(request).text
    parsed = parse_synthesized_qa(raw)
    if parsed is None:
        logger.info(f"Synthesis output for {fact.id} did not parse; stored as deleted")
        return KnowledgeQA(
            id=qa_id_for(fact.id),
            source_fact_id=fact.id,
            question="",
            answer="",
            curation_status="deleted",
            raw_output=raw,
        )
    question, answer = parsed
    return KnowledgeQA(
        id=qa_id_for(fact.id),
        source_fact_id=fact.id,
        question=question,
        answer=answer,
        curation_status="pending",
        raw_output=raw,
    )


def synthesize_knowledge_qas(facts, synth_model_id, gateway, templates, progress=False):
    """One synthesis call per fact; results enter curation as pending."""
    facts = list(facts)
    if not facts:
        raise PreconditionError("no oracle facts to synthesize QAs from")
    qas, failed = {}, []
    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as executor:
        futures = {
            executor.submit(_synthesize_one, fact, synth_model_id, gateway, templates): fact
            for fact in facts
        }
        for future in tqdm(
            as_completed(futures), total=len(futures), desc="Synthesizing QAs", disable=not progress
        ):
            fact = futures[future]
            try:
                qas[fact.id] = future.result()
            except BackendError as e:
                logger.warning(f"Synthesis failed for {fact.id}: {e}")
                failed.append(fact.id)
    ordered = tuple(qas[fact.id] for fact in facts if fact.id in qas)
    return SynthesisResult(qas=ordered, failed_fact_ids=tuple(sorted(failed)))


def curate_qa(qas, qa_id, status, question=None, answer=None):
    """
    Move one QA through the curation state machine.

    Editing the question or answer lands in 'edited', except when reviving a
    deleted QA, which returns to 'pending' with the corrected text.

    Returns:
        New tuple of QAs with the target replaced
    """
    if status not in CURATION_STATUSES:
        raise PreconditionError(f"unknown curation status '{status}'")
    index = next((i for i, qa in enumerate(qas) if qa.id == qa_id), None)
    if index is None:
        raise DatasetError(f"no knowledge QA with id '{qa_id}'")
    current = qas[index]

    changes = {}
    if question is not None and question != current.question:
        changes["question"] = question
    if answer is not None and answer != current.answer:
        changes["answer"] = answer
    target = "edited" if changes and current.curation_status != "deleted" else status

    if target not in CURATION_TRANSITIONS[current.curation_status]:
        raise PreconditionError(
            f"cannot move '{qa_id}' from {current.curation_status} to {target}"
        )
    try:
        updated = replace(current, curation_status=target, **changes)
    except ValueError as e:
        raise PreconditionError(str(e)) from e
    return qas[:index] + (updated,) + qas[index + 1 :]


# ---------------------------------------------------------------------------
# Elicitation accuracy
# ---------------------------------------------------------------------------


def normalize_answer(text):
    """First line, trimmed, with punctuation removed. Idempotent."""
    first_line = text.split("\n", 1)[0]
    return first_line.strip().translate(_PUNCTUATION_TABLE).strip()


@dataclass(frozen=True)
class QAMatch:
    qa_id: str
    gold: str
    raw_output: str
    normalized_output: str
    match: bool
    flag: str = None


@dataclass(frozen=True)
class AccuracyResult:
    model_id: str
    matches: tuple
    skipped_deleted: int = 0
    skipped_pending: int = 0
    uncurated: bool = False

    @property
    def evaluated(self):
        return len(self.matches)

    @property
    def accuracy(self):
        return sum(1 for m in self.matches if m.match) / self.evaluated

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "accuracy": self.accuracy,
            "evaluated": self.evaluated,
            "skipped_deleted": self.skipped_deleted,
            "skipped_pending": self.skipped_pending,
            "uncurated": self.uncurated,
            "matches": [asdict(m) for m in self.matches],
        }

    @classmethod
    def from_dict(cls, record):
        return cls(
            model_id=record["model_id"],
            matches=tuple(QAMatch(**m) for m in record["matches"]),
            skipped_deleted=record.get("skipped_deleted", 0),
            skipped_pending=record.get("skipped_pending", 0),
            uncurated=record.get("uncurated", False),
        )


def _answer_one(qa, model_id, gateway, templates):
    request = GenerationRequest(
        model_id=model_id,
        prompt=build_knowledge_qa_prompt(qa.question, templates),
        temperature=0.0,
        max_tokens=DEFAULT_KNOWLEDGE_MAX_TOKENS,
        decode_mode=DecodeMode.GREEDY,
    )
    try:
        raw = gateway.generate(request).text
    except BackendError as e:
        logger.warning(f"Answering {qa.id} failed: {e}")
        return QAMatch(qa.id, qa.answer, "", "", False, f"generation failed: {e}")
    normalized = normalize_answer(raw)
    return QAMatch(qa.id, qa.answer, raw, normalized, normalized == normalize_answer(qa.answer))


def elicitation_accuracy(qas, model_id, gateway, templates, allow_uncurated=False, progress=False):
    """
    Greedy closed-book answers scored by normalized, case-sensitive exact match.

    Deleted QAs never count. Pending QAs count only with allow_uncurated.
    """
    allowed = EVALUABLE_STATUSES | ({"pending"} if allow_uncurated else set())
    evaluable = [qa for qa in qas if qa.curation_status in allowed]
    skipped_deleted = sum(1 for qa in qas if qa.curation_status == "deleted")
    skipped_pending = sum(
        1 for qa in qas if qa.curation_status == "pending" and not allow_uncurated
    )
    if not evaluable:
        if skipped_pending:
            raise PreconditionError(
                f"{skipped_pending} knowledge QAs are pending curation; approve or edit "
                "them with 'knowledge curate', or pass --allow-uncurated"
            )
        raise PreconditionError("no knowledge QAs to evaluate")
    if allow_uncurated and any(qa.curation_status == "pending" for qa in evaluable):
        logger.warning("Evaluating knowledge QAs that have not been curated")

    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as executor:
        futures = [executor.submit(_answer_one, qa, model_id, gateway, templates) for qa in evaluable]
        for _ in tqdm(
            as_completed(futures), total=len(futures), desc="Answering QAs", disable=not progress
        ):
            pass
        matches = tuple(f.result() for f in futures)

    return AccuracyResult(
        model_id=model_id,
        matches=matches,
        skipped_deleted=skipped_deleted,
        skipped_pending=skipped_pending,
        uncurated=allow_uncurated,
    )


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class KnowledgeReport:
    manifest: dict = field(default_factory=dict)
    memorization: MemorizationResult = None
    elicitation: AccuracyResult = None
    notes: tuple = ()

    @property
    def mean_perplexity(self):
        return self.memorization.mean_perplexity if self.memorization else None

    @property
    def elicitation_accuracy(self):
        return self.elicitation.accuracy if self.elicitation else None

    def merge(self, other):
        """Combine fragments; the newer fragment wins per section."""
        mine = self.manifest.get("dataset_digest")
        theirs = other.manifest.get("dataset_digest")
        if mine and theirs and mine != theirs:
            raise DatasetMismatchError(mine, theirs)
        memorization = other.memorization or self.memorization
        notes = [n for n in self.notes if not (other.memorization and n == PERPLEXITY_UNSUPPORTED_NOTE)]
        if PERPLEXITY_UNSUPPORTED_NOTE in other.notes:
            memorization = None
        notes += [n for n in other.notes if n not in notes]
        return KnowledgeReport(
            manifest={**self.manifest, **other.manifest},
            memorization=memorization,
            elicitation=other.elicitation or self.elicitation,
            notes=tuple(notes),
        )

    def to_dict(self):
        return round_floats(
            {
                "manifest": self.manifest,
                "memorization": self.memorization.to_dict() if self.memorization else None,
                "elicitation": self.elicitation.to_dict() if self.elicitation else None,
                "notes": list(self.notes),
            }
        )

    @classmethod
    def from_dict(cls, record):
        memorization = record.get("memorization")
        elicitation = record.get("elicitation")
        return cls(
            manifest=dict(record.get("manifest", {})),
            memorization=MemorizationResult.from_dict(memorization) if memorization else None,
            elicitation=AccuracyResult.from_dict(elicitation) if elicitation else None,
            notes=tuple(record.get("notes", [])),
        )


def _csv_text(header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def load_knowledge_report(run_dir):
    path = os.path.join(run_dir, RUN_FILES["knowledge_report"])
    if not os.path.exists(path):
        return None
    return KnowledgeReport.from_dict(read_json(path))


def write_knowledge_report(run_dir, fragment):
    """Merge a fragment into the run's knowledge report and refresh its CSVs."""
    existing = load_knowledge_report(run_dir)
    report = existing.merge(fragment) if existing else fragment
    os.makedirs(run_dir, exist_ok=True)
    write_json(os.path.join(run_dir, RUN_FILES["knowledge_report"]), report.to_dict())
    if report.elicitation:
        write_text_atomic(
            os.path.join(run_dir, RUN_FILES["knowledge_csv"]),
            _csv_text(
                ["qa_id", "gold", "raw_output", "normalized_output", "match"],
                [
                    [m.qa_id, m.gold, m.raw_output, m.normalized_output, int(m.match)]
                    for m in report.elicitation.matches
                ],
            ),
        )
    if report.memorization:
        write_text_atomic(
            os.path.join(run_dir, RUN_FILES["perplexity_csv"]),
            _csv_text(
                ["fact_id", "paragraph_index", "token_count", "usable_logprob_count", "perplexity"],
                [
                    [r.fact_id, r.paragraph_index, r.token_count, r.usable_logprob_count,
                     f"{r.perplexity:.6f}"]
                    for r in report.memorization.records
                ],
            ),
        )
    elif os.path.exists(os.path.join(run_dir, RUN_FILES["perplexity_csv"])):
        os.remove(os.path.join(run_dir, RUN_FILES["perplexity_csv"]))
    return report
