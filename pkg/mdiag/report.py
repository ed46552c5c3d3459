"""Series reports across model checkpoints with bottleneck diagnosis."""

import csv
import html
import io
import json
import logging
from dataclasses import dataclass, field

import markdown

from mdiag.constants import (
    DEFAULT_BOTTLENECK_THRESHOLD,
    DEFAULT_MATCH_TOLERANCE,
    DEFAULT_SUFFICIENT_THRESHOLD,
    REPORT_FORMATS,
)
from mdiag.data import SETTING_ORDER, PromptSetting
from mdiag.errors import DatasetMismatchError, EvaluationError, PreconditionError, UsageError
from mdiag.oracle_eval import GapDiagnosis, diagnose
from mdiag.utils import round_floats

logger = logging.getLogger(__name__)

TELESCOPING_TOLERANCE = 1e-12
KNOWLEDGE_METRICS = ("mean_perplexity", "elicitation_accuracy")


@dataclass(frozen=True)
class ModelSeries:
    label: str
    entries: tuple  # (tag, model_id) pairs

    def __post_init__(self):
        tags = [tag for tag, _ in self.entries]
        if len(set(tags)) != len(tags):
            raise PreconditionError(f"series '{self.label}' repeats a tag")

    @property
    def tags(self):
        return [tag for tag, _ in self.entries]


@dataclass
class TagMetrics:
    tag: str
    model_id: str
    asr: dict  # setting value -> macro ASR
    micro_asr: dict = field(default_factory=dict)
    mean_perplexity: float = None
    elicitation_accuracy: float = None
    diagnosis: GapDiagnosis = None
    sufficient: bool = None
    resolves_elicitation: bool = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "tag": self.tag,
            "model_id": self.model_id,
            "asr": dict(self.asr),
            "micro_asr": dict(self.micro_asr),
            "mean_perplexity": self.mean_perplexity,
            "elicitation_accuracy": self.elicitation_accuracy,
            "diagnosis": self.diagnosis.to_dict() if self.diagnosis else None,
            "sufficient": self.sufficient,
            "resolves_elicitation": self.resolves_elicitation,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, record):
        diagnosis = record.get("diagnosis")
        return cls(
            **{
                **record,
                "diagnosis": GapDiagnosis.from_dict(diagnosis) if diagnosis else None,
            }
        )


@dataclass
class DiagnosisReport:
    label: str
    dataset_digest: str
    settings: list
    tags: list
    threshold: float = DEFAULT_BOTTLENECK_THRESHOLD
    sufficient_threshold: float = DEFAULT_SUFFICIENT_THRESHOLD
    match_tolerance: float = DEFAULT_MATCH_TOLERANCE
    reference_tag: str = None
    notes: list = field(default_factory=list)

    @property
    def series(self):
        return ModelSeries(self.label, tuple((t.tag, t.model_id) for t in self.tags))

    def to_dict(self):
        return round_floats(
            {
                "label": self.label,
                "dataset_digest": self.dataset_digest,
                "settings": list(self.settings),
                "threshold": self.threshold,
                "sufficient_threshold": self.sufficient_threshold,
                "match_tolerance": self.match_tolerance,
                "reference_tag": self.reference_tag,
                "notes": list(self.notes),
                "tags": [t.to_dict() for t in self.tags],
            }
        )

    @classmethod
    def from_dict(cls, record):
        return cls(
            **{**record, "tags": [TagMetrics.from_dict(t) for t in record["tags"]]}
        )


def _check_telescoping(tag, diagnosis, no_oracle):
    total = (
        diagnosis.elicitation_gap + diagnosis.reasoning_gap + diagnosis.composing_gap + no_oracle
    )
    if abs(total - 1.0) > TELESCOPING_TOLERANCE:
        raise EvaluationError(f"gaps of '{tag}' do not sum to 1 (got {total!r})")


def build_series_report(
    results,
    label="series",
    threshold=DEFAULT_BOTTLENECK_THRESHOLD,
    sufficient_threshold=DEFAULT_SUFFICIENT_THRESHOLD,
    match_tolerance=DEFAULT_MATCH_TOLERANCE,
    reference_tag=None,
):
    """
    Tabulate ASR and knowledge metrics per checkpoint tag.

    Args:
        results: list of (tag, ASRReport, KnowledgeReport or None) in series order
        reference_tag: model whose oracle-elicitation ASR a later checkpoint's
            no-oracle ASR is compared against; the first tag by default

    Raises:
        DatasetMismatchError: the entries were evaluated on different datasets
    """
    results = list(results)
    if not results:
        raise PreconditionError("a series report needs at least one run")
    ModelSeries(label, tuple((tag, None) for tag, _, _ in results))

    digest = results[0][1].manifest.get("dataset_digest")
    for _, asr_report, knowledge_report in results:
        for other in (
            asr_report.manifest.get("dataset_digest"),
            knowledge_report.manifest.get("dataset_digest") if knowledge_report else None,
        ):
            if other is not None and other != digest:
                raise DatasetMismatchError(digest, other)

    settings = [s.value for s in SETTING_ORDER if any(s in r[1].settings for r in results)]
    reference_tag = reference_tag or results[0][0]
    if reference_tag not in [tag for tag, _, _ in results]:
        raise PreconditionError(f"reference tag '{reference_tag}' is not in the series")

    reference_asr = next(r[1] for r in results if r[0] == reference_tag)
    reference_elicitation = (
        reference_asr.settings[PromptSetting.ORACLE_ELICITATION].macro_asr
        if PromptSetting.ORACLE_ELICITATION in reference_asr.settings
        else None
    )

    tags = []
    notes = []
    for tag, asr_report, knowledge_report in results:
        asr = {s.value: summary.macro_asr for s, summary in asr_report.settings.items()}
        diagnosis = diagnose(asr, threshold)
        if diagnosis is not None:
            _check_telescoping(tag, diagnosis, asr[PromptSetting.NO_ORACLE.value])

        reasoning = asr.get(PromptSetting.ORACLE_REASONING.value)
        no_oracle = asr.get(PromptSetting.NO_ORACLE.value)
        resolves = None
        if reference_elicitation is not None and no_oracle is not None and tag != reference_tag:
            resolves = abs(no_oracle - reference_elicitation) <= match_tolerance
            if resolves:
                notes.append(
                    f"{tag}: no-oracle ASR matches the oracle-elicitation ASR of "
                    f"{reference_tag} within {match_tolerance}"
                )
        sufficient = reasoning >= sufficient_threshold if reasoning is not None else None
        if sufficient:
            notes.append(
                f"{tag}: sufficient performance band (oracle-reasoning ASR >= {sufficient_threshold})"
            )

        tags.append(
            TagMetrics(
                tag=tag,
                model_id=asr_report.manifest.get("config", {}).get("answer_model", ""),
                asr=asr,
                micro_asr={s.value: v.micro_asr for s, v in asr_report.settings.items()},
                mean_perplexity=knowledge_report.mean_perplexity if knowledge_report else None,
                elicitation_accuracy=(
                    knowledge_report.elicitation_accuracy if knowledge_report else None
                ),
                diagnosis=diagnosis,
                sufficient=sufficient,
                resolves_elicitation=resolves,
                provenance={
                    "config_digest": asr_report.manifest.get("config_digest"),
                    "template_digest": asr_report.manifest.get("template_digest"),
                },
            )
        )
        notes.extend(n for n in asr_report.notes if n not in notes)
        if knowledge_report:
            notes.extend(f"{tag}: {n}" for n in knowledge_report.notes)

    return DiagnosisReport(
        label=label,
        dataset_digest=digest,
        settings=settings,
        tags=tags,
        threshold=threshold,
        sufficient_threshold=sufficient_threshold,
        match_tolerance=match_tolerance,
        reference_tag=reference_tag,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _table(columns, rows):
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    lines.extend("| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows)
    return "\n".join(lines)


def render_json(report):
    """
    Canonical JSON with floats rounded to 6 digits.

    The rounding is lossy: parsing the output gives a report that renders to the
    same bytes but does not compare equal to the in-memory original.
    """
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def render_csv(report):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["tag", "metric", "setting", "value"])
    for t in report.tags:
        for setting in report.settings:
            writer.writerow([t.tag, "asr", setting, _fmt(t.asr.get(setting))])
        for metric in KNOWLEDGE_METRICS:
            writer.writerow([t.tag, metric, "", _fmt(getattr(t, metric))])
    return buffer.getvalue()


def render_markdown(report):
    sections = [
        f"# Diagnosis report: {report.label}",
        f"Dataset digest: `{report.dataset_digest}`  \n"
        f"Bottleneck threshold: {report.threshold}  \n"
        f"Reference tag: {report.reference_tag}",
        "## Answer Success Rate",
        _table(["Tag"] + report.settings, [[t.tag] + [t.asr.get(s) for s in report.settings] for t in report.tags]),
        "## Knowledge",
        _table(
            ["Tag", "Mean perplexity", "Elicitation accuracy"],
            [[t.tag, t.mean_perplexity, t.elicitation_accuracy] for t in report.tags],
        ),
    ]
    if any(t.diagnosis for t in report.tags):
        sections += [
            "## Bottleneck diagnosis",
            _table(
                ["Tag", "Elicitation gap", "Reasoning gap", "Composing gap", "Bottlenecks", "Sufficient"],
                [
                    [
                        t.tag,
                        t.diagnosis.elicitation_gap,
                        t.diagnosis.reasoning_gap,
                        t.diagnosis.composing_gap,
                        ", ".join(t.diagnosis.bottlenecks) or "none",
                        t.sufficient,
                    ]
                    for t in report.tags
                    if t.diagnosis
                ],
            ),
        ]
    if report.notes:
        sections += ["## Notes", "\n".join(f"- {note}" for note in report.notes)]
    return "\n\n".join(sections) + "\n"


def render_html(report):
    body = markdown.Markdown(extensions=["tables"]).convert(render_markdown(report))
    return (
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
        f"<title>Diagnosis report: {html.escape(report.label)}</title>\n</head>\n<body>\n"
        f"{body}\n</body>\n</html>\n"
    )


_RENDERERS = {
    "json": render_json,
    "markdown": render_markdown,
    "csv": render_csv,
    "html": render_html,
}


def render_report(report, fmt):
    if fmt not in _RENDERERS:
        raise UsageError(
            f"unknown report format '{fmt}' (expected one of {', '.join(REPORT_FORMATS)})"
        )
    return _RENDERERS[fmt](report).encode("utf-8")


def parse_report_json(data):
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return DiagnosisReport.from_dict(json.loads(data))
