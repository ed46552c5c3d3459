"""Multi-step oracle evaluation.

Answers are sampled per (item, setting, seed), every checklist condition is
judged by a second model, and the Answer Success Rate (ASR) is aggregated per
item and per setting. Comparing the three settings tells which answering
subtask (elicitation, reasoning, composing) is the bottleneck.
"""

import csv
import io
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from scipy import stats
from tqdm import tqdm

from mdiag.constants import (
    ASR_CONFIDENCE_LEVEL,
    DEFAULT_BOTTLENECK_THRESHOLD,
    DEFAULT_JUDGE_MAX_TOKENS,
    DEFAULT_MAX_TOKENS,
    DEFAULT_SEEDS,
    DEFAULT_TEMPERATURE,
    RUN_FILES,
    VERSION,
    WELL_FORMED_JUDGE_OUTPUTS,
)
from mdiag.data import SETTING_ORDER, PromptSetting, dataset_digest, validate_for_setting
from mdiag.errors import BackendError, EvaluationError, PreconditionError
from mdiag.gateway import DecodeMode, GenerationRequest
from mdiag.prompts import build_answer_prompt, build_judge_prompt, template_digest
from mdiag.utils import digest_obj, read_json, round_floats, write_json, write_text_atomic

logger = logging.getLogger(__name__)

FAILED_ANSWER_FLAG = "answer generation failed"
EMPTY_ANSWER_FLAG = "empty answer"
GUIDANCE_PLACEMENT_NOTE = (
    "guidance conclusions are shown only in the answer-strategy block, "
    "not in the background list"
)

_WELL_FORMED_JUDGE_OUTPUT = re.compile(
    r"(?:" + "|".join(sorted(WELL_FORMED_JUDGE_OUTPUTS)) + r")(?!\w)"
)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    settings: tuple = SETTING_ORDER
    seeds: tuple = DEFAULT_SEEDS
    temperature: float = DEFAULT_TEMPERATURE
    answer_model: str = "answer-model"
    judge_model: str = "judge-model"
    max_tokens: int = DEFAULT_MAX_TOKENS
    judge_max_tokens: int = DEFAULT_JUDGE_MAX_TOKENS
    bottleneck_threshold: float = DEFAULT_BOTTLENECK_THRESHOLD

    def __post_init__(self):
        settings = tuple(PromptSetting.parse(s) for s in self.settings)
        if not settings:
            raise ValueError("at least one prompt setting is required")
        if len(set(settings)) != len(settings):
            raise ValueError("prompt settings repeat")
        # Keep the canonical least-oracle-first order regardless of input order
        object.__setattr__(
            self, "settings", tuple(s for s in SETTING_ORDER if s in settings)
        )
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        object.__setattr__(self, "seeds", seeds)
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1 or self.judge_max_tokens < 1:
            raise ValueError("token budgets must be positive")

    def to_dict(self):
        return {
            "settings": [s.value for s in self.settings],
            "seeds": list(self.seeds),
            "temperature": self.temperature,
            "answer_model": self.answer_model,
            "judge_model": self.judge_model,
            "max_tokens": self.max_tokens,
            "judge_max_tokens": self.judge_max_tokens,
            "bottleneck_threshold": self.bottleneck_threshold,
        }

    @classmethod
    def from_dict(cls, record):
        known = {k: v for k, v in record.items() if k in cls.__dataclass_fields__}
        for key in ("settings", "seeds"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)

    def digest(self):
        return digest_obj(self.to_dict())


@dataclass(frozen=True)
class AnswerRecord:
    item_id: str
    setting: PromptSetting
    seed: int
    answer_text: str
    finish_reason: str = "stop"
    cached: bool = False
    failed: bool = False
    error: str = None

    @property
    def key(self):
        return (self.item_id, self.setting.value, self.seed)

    def to_dict(self):
        record = asdict(self)
        record["setting"] = self.setting.value
        return record

    @classmethod
    def from_dict(cls, record):
        return cls(**{**record, "setting": PromptSetting.parse(record["setting"])})


@dataclass(frozen=True)
class ConditionVerdict:
    checklist_id: str
    condition_id: str
    raw_judge_output: str
    satisfied: bool
    flag: str = None


@dataclass(frozen=True)
class JudgedAnswer:
    answer: AnswerRecord
    verdicts: tuple
    correct: bool

    @property
    def flags(self):
        return sorted({v.flag for v in self.verdicts if v.flag})

    def to_dict(self):
        return {
            "item_id": self.answer.item_id,
            "setting": self.answer.setting.value,
            "seed": self.answer.seed,
            "correct": self.correct,
            "verdicts": [asdict(v) for v in self.verdicts],
        }


@dataclass(frozen=True)
class ItemASR:
    item_id: str
    setting: PromptSetting
    correct_count: int
    total_count: int

    @property
    def asr(self):
        return self.correct_count / self.total_count

    def to_dict(self):
        return {
            "item_id": self.item_id,
            "setting": self.setting.value,
            "correct_count": self.correct_count,
            "total_count": self.total_count,
            "asr": self.asr,
        }


@dataclass(frozen=True)
class SettingSummary:
    setting: PromptSetting
    macro_asr: float
    micro_asr: float
    correct: int
    total: int
    ci_low: float
    ci_high: float
    n_items: int
    skipped_items: tuple = ()

    def to_dict(self):
        record = asdict(self)
        record["setting"] = self.setting.value
        record["skipped_items"] = list(self.skipped_items)
        return record

    @classmethod
    def from_dict(cls, record):
        return cls(
            **{
                **record,
                "setting": PromptSetting.parse(record["setting"]),
                "skipped_items": tuple(record.get("skipped_items", ())),
            }
        )


@dataclass(frozen=True)
class GapDiagnosis:
    """Bottleneck gaps; they telescope: e + r + c + ASR(no-oracle) = 1."""

    elicitation_gap: float
    reasoning_gap: float
    composing_gap: float
    threshold: float
    bottlenecks: tuple

    def to_dict(self):
        record = asdict(self)
        record["bottlenecks"] = list(self.bottlenecks)
        return record

    @classmethod
    def from_dict(cls, record):
        return cls(**{**record, "bottlenecks": tuple(record["bottlenecks"])})


@dataclass
class ASRReport:
    items: list
    settings: dict
    manifest: dict
    malformed_judge_outputs: int = 0
    flagged: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    judged: list = field(default_factory=list, repr=False, compare=False)

    def asr(self, setting):
        return self.settings[PromptSetting.parse(setting)].macro_asr

    def diagnosis(self):
        return diagnose(
            {s: summary.macro_asr for s, summary in self.settings.items()},
            self.manifest.get("config", {}).get(
                "bottleneck_threshold", DEFAULT_BOTTLENECK_THRESHOLD
            ),
        )

    def to_dict(self):
        diagnosis = self.diagnosis()
        return round_floats(
            {
                "manifest": self.manifest,
                "settings": {s.value: v.to_dict() for s, v in self.settings.items()},
                "items": [i.to_dict() for i in self.items],
                "malformed_judge_outputs": self.malformed_judge_outputs,
                "flagged": self.flagged,
                "notes": self.notes,
                "diagnosis": diagnosis.to_dict() if diagnosis else None,
            }
        )

    @classmethod
    def from_dict(cls, record):
        settings = {}
        for value in record["settings"].values():
            summary = SettingSummary.from_dict(value)
            settings[summary.setting] = summary
        items = [
            ItemASR(
                item_id=i["item_id"],
                setting=PromptSetting.parse(i["setting"]),
                correct_count=i["correct_count"],
                total_count=i["total_count"],
            )
            for i in record["items"]
        ]
        return cls(
            items=items,
            settings=settings,
            manifest=record["manifest"],
            malformed_judge_outputs=record.get("malformed_judge_outputs", 0),
            flagged=list(record.get("flagged", [])),
            notes=list(record.get("notes", [])),
        )


# ---------------------------------------------------------------------------
# Judging
# ---------------------------------------------------------------------------


def parse_judge_output(raw):
    """True iff the trimmed output begins with 'Yes' or 'yes'."""
    return (raw or "").strip().startswith(("Yes", "yes"))


def is_malformed_judge_output(raw):
    """Anything but a leading standalone Yes/yes/No/no token counts as malformed."""
    return _WELL_FORMED_JUDGE_OUTPUT.match((raw or "").strip()) is None


def aggregate(checklists, verdicts):
    """OR over checklists of AND over that checklist's condition verdicts."""
    satisfied = {(v.checklist_id, v.condition_id): v.satisfied for v in verdicts}
    return any(
        all(satisfied.get((checklist.id, c.id), False) for c in checklist.conditions)
        for checklist in checklists
    )


def _unjudged(checklists, flag):
    return tuple(
        ConditionVerdict(checklist.id, c.id, "", False, flag)
        for checklist in checklists
        for c in checklist.conditions
    )


def judge_condition(answer_text, checklist, condition, cfg, gateway, templates):
    prompt = build_judge_prompt(answer_text, condition, templates)
    request = GenerationRequest(
        model_id=cfg.judge_model,
        prompt=prompt,
        temperature=0.0,
        seed=0,
        max_tokens=cfg.judge_max_tokens,
        decode_mode=DecodeMode.GREEDY,
    )
    try:
        raw = gateway.generate(request).text
    except BackendError as e:
        logger.warning(f"Judge call failed for condition {checklist.id}/{condition.id}: {e}")
        return ConditionVerdict(checklist.id, condition.id, "", False, f"judge call failed: {e}")
    return ConditionVerdict(checklist.id, condition.id, raw, parse_judge_output(raw))


def judge_answer(answer, checklists, cfg, gateway, templates, executor=None):
    """
    Judge one answer against every condition of every checklist.

    Failed or empty answers are marked incorrect without any judge call.
    """
    if not checklists:
        raise PreconditionError("judge_answer needs at least one checklist")
    if answer.failed:
        return JudgedAnswer(answer, _unjudged(checklists, FAILED_ANSWER_FLAG), False)
    if not answer.answer_text.strip():
        return JudgedAnswer(answer, _unjudged(checklists, EMPTY_ANSWER_FLAG), False)

    pairs = [(checklist, c) for checklist in checklists for c in checklist.conditions]
    if executor is None:
        verdicts = [
            judge_condition(answer.answer_text, cl, c, cfg, gateway, templates)
            for cl, c in pairs
        ]
    else:
        futures = [
            executor.submit(
                judge_condition, answer.answer_text, cl, c, cfg, gateway, templates
            )
            for cl, c in pairs
        ]
        verdicts = [f.result() for f in futures]
    verdicts = tuple(verdicts)
    return JudgedAnswer(answer, verdicts, aggregate(checklists, verdicts))


def compute_asr(judged):
    if not judged:
        raise PreconditionError("cannot compute ASR over no answers")
    return sum(1 for j in judged if j.correct) / len(judged)


def binomial_interval(correct, total, level=ASR_CONFIDENCE_LEVEL):
    """Exact (Clopper-Pearson) interval for a success proportion."""
    if total == 0:
        return 0.0, 1.0
    ci = stats.binomtest(correct, total).proportion_ci(
        confidence_level=level, method="exact"
    )
    return float(ci.low), float(ci.high)


def diagnose(asr_by_setting, threshold=DEFAULT_BOTTLENECK_THRESHOLD):
    """Gap triple and bottleneck labels; None unless all three settings ran."""
    asr = {PromptSetting.parse(s): v for s, v in asr_by_setting.items()}
    if any(s not in asr for s in SETTING_ORDER):
        return None
    no_oracle = asr[PromptSetting.NO_ORACLE]
    elicitation = asr[PromptSetting.ORACLE_ELICITATION]
    reasoning = asr[PromptSetting.ORACLE_REASONING]
    gaps = {
        "elicitation": elicitation - no_oracle,
        "reasoning": reasoning - elicitation,
        "composing": 1.0 - reasoning,
    }
    return GapDiagnosis(
        elicitation_gap=gaps["elicitation"],
        reasoning_gap=gaps["reasoning"],
        composing_gap=gaps["composing"],
        threshold=threshold,
        bottlenecks=tuple(name for name, gap in gaps.items() if gap > threshold),
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_one(item, setting, seed, prompt, cfg, gateway):
    request = GenerationRequest(
        model_id=cfg.answer_model,
        prompt=prompt,
        temperature=cfg.temperature,
        seed=seed,
        max_tokens=cfg.max_tokens,
    )
    try:
        result = gateway.generate(request)
    except BackendError as e:
        logger.warning(f"Generation failed for {item.id} ({setting.value}, seed {seed}): {e}")
        return AnswerRecord(
            item.id, setting, seed, "", finish_reason="error", failed=True, error=str(e)
        )
    return AnswerRecord(
        item.id,
        setting,
        seed,
        result.text,
        finish_reason=result.finish_reason,
        cached=result.cached,
    )


def _check_not_all_failed(records):
    if records and all(r.failed for r in records):
        first = records[0]
        raise BackendError(
            f"all {len(records)} seeds failed for item '{first.item_id}' "
            f"({first.setting.value}): {first.error}"
        )


def sample_answers(item, setting, cfg, gateway, templates, executor=None):
    """One answer per seed, sorted by seed."""
    setting = PromptSetting.parse(setting)
    prompt = build_answer_prompt(item, setting, templates)
    if executor is None:
        records = [sample_one(item, setting, s, prompt, cfg, gateway) for s in cfg.seeds]
    else:
        futures = [
            executor.submit(sample_one, item, setting, s, prompt, cfg, gateway)
            for s in cfg.seeds
        ]
        records = [f.result() for f in futures]
    records.sort(key=lambda r: r.seed)
    _check_not_all_failed(records)
    return records


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------


def _progress(futures, desc, enabled):
    return tqdm(as_completed(futures), total=len(futures), desc=desc, disable=not enabled)


def run_oracle_eval(ds, cfg, gateway, templates, progress=False):
    """
    Sample, judge and aggregate every (setting, item, seed) of a run.

    Items that cannot run a setting are skipped with a note. Aggregation is
    done after collection with sorted keys, so completion order never matters.

    Returns:
        ASRReport with the judged answers attached
    """
    if not ds.items:
        raise EvaluationError("dataset has no items")

    plan = []
    skipped = {}
    notes = []
    for setting in cfg.settings:
        runnable = []
        for item in ds.items:
            check = validate_for_setting(item, setting)
            if check.valid:
                runnable.append(item)
            else:
                skipped.setdefault(setting, []).append(item.id)
                notes.append(f"{item.id} skipped for {setting.value}: {'; '.join(check.reasons)}")
        if not runnable:
            raise EvaluationError(f"no item can run setting {setting.value}")
        plan.extend((setting, item) for item in runnable)

    if PromptSetting.ORACLE_REASONING in cfg.settings and any(
        c.is_guidance for item in ds.items for c in item.oracle_conclusions
    ):
        notes.append(GUIDANCE_PLACEMENT_NOTE)

    prompts = {(s, item.id): build_answer_prompt(item, s, templates) for s, item in plan}
    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as executor:
        futures = [
            executor.submit(sample_one, item, s, seed, prompts[(s, item.id)], cfg, gateway)
            for s, item in plan
            for seed in cfg.seeds
        ]
        for _ in _progress(futures, "Sampling answers", progress):
            pass
        answers = [f.result() for f in futures]

        by_cell = {}
        for record in answers:
            by_cell.setdefault((record.setting, record.item_id), []).append(record)
        for records in by_cell.values():
            _check_not_all_failed(records)

        items = {item.id: item for item in ds.items}
        judge_futures = [
            executor.submit(judge_answer, record, items[record.item_id].checklists, cfg, gateway, templates)
            for record in answers
        ]
        for _ in _progress(judge_futures, "Judging answers", progress):
            pass
        judged = [f.result() for f in judge_futures]

    report = build_asr_report(
        judged,
        cfg,
        manifest={
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "template_digest": template_digest(templates),
            "language": templates.language_tag,
            "dataset_digest": dataset_digest(ds),
        },
        skipped=skipped,
        notes=notes,
    )
    logger.debug(f"Gateway calls: {gateway.calls}, cache hits: {gateway.cache_hits}")
    return report


def build_asr_report(judged, cfg, manifest, skipped=None, notes=()):
    """Aggregate judged answers; input order is irrelevant."""
    skipped = skipped or {}
    judged = sorted(
        judged,
        key=lambda j: (SETTING_ORDER.index(j.answer.setting), j.answer.item_id, j.answer.seed),
    )

    cells = {}
    for j in judged:
        cells.setdefault((j.answer.setting, j.answer.item_id), []).append(j)

    items = [
        ItemASR(
            item_id=item_id,
            setting=setting,
            correct_count=sum(1 for j in group if j.correct),
            total_count=len(group),
        )
        for (setting, item_id), group in cells.items()
    ]

    settings = {}
    for setting in cfg.settings:
        rows = [i for i in items if i.setting == setting]
        if not rows:
            continue
        correct = sum(i.correct_count for i in rows)
        total = sum(i.total_count for i in rows)
        low, high = binomial_interval(correct, total)
        settings[setting] = SettingSummary(
            setting=setting,
            macro_asr=sum(i.asr for i in rows) / len(rows),
            micro_asr=correct / total,
            correct=correct,
            total=total,
            ci_low=low,
            ci_high=high,
            n_items=len(rows),
            skipped_items=tuple(skipped.get(setting, ())),
        )

    flagged = [
        {
            "item_id": j.answer.item_id,
            "setting": j.answer.setting.value,
            "seed": j.answer.seed,
            "reasons": j.flags,
        }
        for j in judged
        if j.flags
    ]
    malformed = sum(
        1
        for j in judged
        for v in j.verdicts
        if v.flag is None and is_malformed_judge_output(v.raw_judge_output)
    )
    return ASRReport(
        items=items,
        settings=settings,
        manifest=manifest,
        malformed_judge_outputs=malformed,
        flagged=flagged,
        notes=list(notes),
        judged=judged,
    )


# ---------------------------------------------------------------------------
# Judge audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeAudit:
    compared: int
    agreements: int
    contradictions: tuple
    unlabeled: int

    @property
    def agreement_rate(self):
        return self.agreements / self.compared if self.compared else 0.0

    def to_dict(self):
        return round_floats(
            {
                "compared": self.compared,
                "agreements": self.agreements,
                "agreement_rate": self.agreement_rate,
                "contradictions": [list(c) for c in self.contradictions],
                "unlabeled": self.unlabeled,
            }
        )


def audit_judge(judged, human_labels):
    """
    Compare judge correctness with expert labels.

    Args:
        judged: JudgedAnswer list
        human_labels: {(item_id, setting value, seed): bool}
    """
    compared = agreements = unlabeled = 0
    contradictions = []
    for j in judged:
        key = j.answer.key
        if key not in human_labels:
            unlabeled += 1
            continue
        compared += 1
        if bool(human_labels[key]) == j.correct:
            agreements += 1
        else:
            contradictions.append(key)
    return JudgeAudit(compared, agreements, tuple(sorted(contradictions)), unlabeled)


_TRUE_LABELS = {"1", "true", "yes", "y", "correct"}
_FALSE_LABELS = {"0", "false", "no", "n", "incorrect"}


def load_human_labels(path):
    """CSV with columns item_id, setting, seed, correct."""
    labels = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row_num, row in enumerate(csv.DictReader(f), 2):
            try:
                value = row["correct"].strip().lower()
                key = (row["item_id"], PromptSetting.parse(row["setting"]).value, int(row["seed"]))
            except (KeyError, ValueError, AttributeError) as e:
                raise EvaluationError(f"{path}, row {row_num}: cannot read label ({e})") from e
            if value in _TRUE_LABELS:
                labels[key] = True
            elif value in _FALSE_LABELS:
                labels[key] = False
            else:
                raise EvaluationError(f"{path}, row {row_num}: unknown label '{value}'")
    return labels


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------


def _jsonl(records):
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def answers_csv(judged):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["item_id", "setting", "seed", "correct"])
    for j in judged:
        writer.writerow([j.answer.item_id, j.answer.setting.value, j.answer.seed, int(j.correct)])
    return buffer.getvalue()


def write_run_dir(run_dir, report, config_record):
    """Write every artefact of an evaluation run; returns the paths written."""
    os.makedirs(run_dir, exist_ok=True)
    paths = {name: os.path.join(run_dir, RUN_FILES[name]) for name in
             ("config", "manifest", "answers", "verdicts", "asr_report", "answers_csv")}
    write_json(paths["config"], config_record)
    write_json(
        paths["manifest"],
        {
            **report.manifest,
            "version": VERSION,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )
    write_text_atomic(paths["answers"], _jsonl(j.answer.to_dict() for j in report.judged))
    write_text_atomic(paths["verdicts"], _jsonl(j.to_dict() for j in report.judged))
    write_json(paths["asr_report"], report.to_dict())
    write_text_atomic(paths["answers_csv"], answers_csv(report.judged))
    return paths


def load_run_dir(run_dir):
    """Read a run's ASR report back, with judged answers when present."""
    report_path = os.path.join(run_dir, RUN_FILES["asr_report"])
    if not os.path.exists(report_path):
        raise EvaluationError(f"{run_dir} has no {RUN_FILES['asr_report']}")
    report = ASRReport.from_dict(read_json(report_path))

    answers_path = os.path.join(run_dir, RUN_FILES["answers"])
    verdicts_path = os.path.join(run_dir, RUN_FILES["verdicts"])
    if os.path.exists(answers_path) and os.path.exists(verdicts_path):
        answers = {}
        with open(answers_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    record = AnswerRecord.from_dict(json.loads(line))
                    answers[record.key] = record
        with open(verdicts_path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                key = (row["item_id"], PromptSetting.parse(row["setting"]).value, row["seed"])
                report.judged.append(
                    JudgedAnswer(
                        answer=answers[key],
                        verdicts=tuple(ConditionVerdict(**v) for v in row["verdicts"]),
                        correct=row["correct"],
                    )
                )
    return report
