import itertools
import random

import pytest

from conftest import make_gateway, sim_setup
from mdiag.data import Checklist, Condition, Dataset, PromptSetting
from mdiag.errors import BackendError, EvaluationError, PreconditionError, TransportError
from mdiag.gateway import ScriptedBackend
from mdiag.oracle_eval import (
    FAILED_ANSWER_FLAG,
    AnswerRecord,
    ConditionVerdict,
    JudgedAnswer,
    RunConfig,
    aggregate,
    audit_judge,
    binomial_interval,
    compute_asr,
    diagnose,
    is_malformed_judge_output,
    judge_answer,
    load_human_labels,
    load_run_dir,
    parse_judge_output,
    run_oracle_eval,
    sample_answers,
    write_run_dir,
)
from mdiag.prompts import match_template
from mdiag.simulator import CapabilitySpec, exact_setting_asr, expected_asr

SETTINGS = [s.value for s in PromptSetting]


def verdicts_for(values):
    """values: {(checklist_id, condition_id): bool}"""
    return [ConditionVerdict(cl, c, "Yes" if v else "No", v) for (cl, c), v in values.items()]


def judged(correct, item_id="q1", seed=0, setting=PromptSetting.NO_ORACLE):
    return JudgedAnswer(AnswerRecord(item_id, setting, seed, "answer"), (), correct)


@pytest.mark.parametrize("c1, c2, c3", list(itertools.product([False, True], repeat=3)))
def test_aggregation_truth_table(two_checklist_item, c1, c2, c3):
    verdicts = verdicts_for({("A", "c1"): c1, ("A", "c2"): c2, ("B", "c3"): c3})
    assert aggregate(two_checklist_item.checklists, verdicts) == ((c1 and c2) or c3)


def test_aggregation_is_monotone_in_verdicts():
    rng = random.Random(7)
    for _ in range(200):
        checklists = [
            Checklist(f"L{i}", tuple(Condition(f"c{j}", "text") for j in range(rng.randint(1, 3))))
            for i in range(rng.randint(1, 3))
        ]
        keys = [(cl.id, c.id) for cl in checklists for c in cl.conditions]
        values = {key: rng.random() < 0.5 for key in keys}
        before = aggregate(checklists, verdicts_for(values))
        for key in keys:
            if not values[key]:
                after = aggregate(checklists, verdicts_for({**values, key: True}))
                assert after or not before


@pytest.mark.parametrize(
    "raw, expected, malformed",
    [
        ("Yes", True, False),
        ("yes", True, False),
        ("Yes.", True, False),
        ("  Yes\n", True, False),
        ("No", False, False),
        ("no", False, False),
        ("Maybe yes", False, True),
        ("", False, True),
        ("%%garbage%%", False, True),
        ("YES", False, True),
        ("Nope", False, True),
        ("Nonsense", False, True),
        ("Nothing to judge", False, True),
        ("yesterday", True, True),
        ("No, the answer omits it.", False, False),
    ],
)
def test_judge_output_parse_table(raw, expected, malformed):
    assert parse_judge_output(raw) is expected
    assert is_malformed_judge_output(raw) is malformed


@pytest.mark.parametrize("correct, total, expected", [(4, 10, 0.4), (10, 10, 1.0), (0, 10, 0.0)])
def test_compute_asr(correct, total, expected):
    answers = [judged(i < correct, seed=i) for i in range(total)]
    assert compute_asr(answers) == expected


def test_compute_asr_rejects_empty():
    with pytest.raises(PreconditionError):
        compute_asr([])


def test_binomial_interval_bounds():
    low, high = binomial_interval(0, 10)
    assert low == 0.0 and 0 < high < 1
    low, high = binomial_interval(10, 10)
    assert high == pytest.approx(1.0) and 0 < low < 1
    low, high = binomial_interval(5, 10)
    assert low < 0.5 < high


@pytest.mark.parametrize(
    "asr, gaps, bottlenecks",
    [
        ((0.2, 0.6, 0.8), (0.4, 0.2, 0.2), ("elicitation", "reasoning", "composing")),
        ((0.9, 0.9, 0.92), (0.0, 0.02, 0.08), ("composing",)),
        ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), ()),
    ],
)
def test_diagnose(asr, gaps, bottlenecks):
    diagnosis = diagnose(dict(zip(SETTINGS, asr)), threshold=0.05)
    assert (diagnosis.elicitation_gap, diagnosis.reasoning_gap, diagnosis.composing_gap) == pytest.approx(gaps)
    assert diagnosis.bottlenecks == bottlenecks
    total = diagnosis.elicitation_gap + diagnosis.reasoning_gap + diagnosis.composing_gap + asr[0]
    assert abs(total - 1.0) <= 1e-12


def test_diagnose_needs_all_settings():
    assert diagnose({"no-oracle": 0.5, "oracle-reasoning": 0.9}) is None


def test_run_config_orders_settings_and_validates():
    cfg = RunConfig(settings=("oracle-reasoning", "no-oracle"), seeds=(3, 1))
    assert cfg.settings == (PromptSetting.NO_ORACLE, PromptSetting.ORACLE_REASONING)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"seeds": ()}, {"seeds": (1, 1)}, {"temperature": -1.0}, {"settings": ()}):
        with pytest.raises(ValueError):
            RunConfig(**bad)


# ---------------------------------------------------------------------------
# Judging and sampling with scripted backends
# ---------------------------------------------------------------------------


def condition_judge(templates, replies):
    """Responder answering judge prompts from a {condition text: reply} map."""

    def respond(request):
        values = match_template(templates.judge_template, request.prompt)
        reply = replies[values["criteria"]]
        if isinstance(reply, Exception):
            raise reply
        return reply

    return respond


def test_judge_answer_or_of_ands(two_checklist_item, templates, fast_run_config):
    replies = {"Names RETRY_WINDOW.": "Yes", "Names QUEUE_DEPTH.": "No", "Names AGENT_POOL.": "yes"}
    gateway = make_gateway(ScriptedBackend(responder=condition_judge(templates, replies)))
    answer = AnswerRecord("q1", PromptSetting.NO_ORACLE, 0, "Use AGENT_POOL.")
    result = judge_answer(answer, two_checklist_item.checklists, fast_run_config, gateway, templates)
    assert result.correct
    assert [(v.condition_id, v.satisfied) for v in result.verdicts] == [("c1", True), ("c2", False), ("c3", True)]


def test_judge_call_failure_is_flagged(two_checklist_item, templates, fast_run_config):
    replies = {
        "Names RETRY_WINDOW.": "Yes",
        "Names QUEUE_DEPTH.": "Yes",
        "Names AGENT_POOL.": BackendError("judge offline"),
    }
    gateway = make_gateway(ScriptedBackend(responder=condition_judge(templates, replies)))
    answer = AnswerRecord("q1", PromptSetting.NO_ORACLE, 0, "Use RETRY_WINDOW and QUEUE_DEPTH.")
    result = judge_answer(answer, two_checklist_item.checklists, fast_run_config, gateway, templates)
    assert result.correct
    flagged = [v for v in result.verdicts if v.flag]
    assert len(flagged) == 1 and flagged[0].condition_id == "c3" and not flagged[0].satisfied
    assert flagged[0].flag.startswith("judge call failed")


def test_failed_answer_is_incorrect_without_judge_calls(two_checklist_item, templates, fast_run_config):
    backend = ScriptedBackend(default_text="Yes")
    gateway = make_gateway(backend)
    answer = AnswerRecord("q1", PromptSetting.NO_ORACLE, 0, "", finish_reason="error", failed=True, error="boom")
    result = judge_answer(answer, two_checklist_item.checklists, fast_run_config, gateway, templates)
    assert not result.correct
    assert result.flags == [FAILED_ANSWER_FLAG]
    assert backend.calls == 0


def test_judge_answer_needs_checklists(templates, fast_run_config):
    gateway = make_gateway(ScriptedBackend(default_text="Yes"))
    with pytest.raises(PreconditionError):
        judge_answer(AnswerRecord("q1", PromptSetting.NO_ORACLE, 0, "x"), (), fast_run_config, gateway, templates)


def test_sample_answers_one_record_per_seed(two_checklist_item, templates, fast_run_config):
    gateway = make_gateway(ScriptedBackend(responder=lambda r: f"answer for seed {r.seed}"))
    records = sample_answers(two_checklist_item, "no-oracle", fast_run_config, gateway, templates)
    assert [r.seed for r in records] == list(range(10))
    assert records[3].answer_text == "answer for seed 3"

    single = RunConfig(seeds=(7,))
    assert len(sample_answers(two_checklist_item, "no-oracle", single, gateway, templates)) == 1


def test_one_failing_seed_is_recorded(two_checklist_item, templates, fast_run_config):
    def respond(request):
        if request.seed == 3:
            raise TransportError("connection reset")
        return "fine"

    gateway = make_gateway(ScriptedBackend(responder=respond), retry_limit=1)
    records = sample_answers(two_checklist_item, "no-oracle", fast_run_config, gateway, templates)
    failed = [r for r in records if r.failed]
    assert [r.seed for r in failed] == [3]
    assert failed[0].finish_reason == "error"
    assert sum(1 for r in records if not r.failed) == 9


def test_all_seeds_failing_aborts(two_checklist_item, templates, fast_run_config):
    def respond(request):
        raise TransportError("down")

    gateway = make_gateway(ScriptedBackend(responder=respond), retry_limit=0)
    with pytest.raises(BackendError):
        sample_answers(two_checklist_item, "no-oracle", fast_run_config, gateway, templates)


# ---------------------------------------------------------------------------
# Full runs against the simulator
# ---------------------------------------------------------------------------


def test_perfect_model_scores_one_everywhere(templates, fast_run_config):
    ds, gateway = sim_setup((1.0, 1.0, 1.0), n_items=5)
    report = run_oracle_eval(ds, fast_run_config, gateway, templates)
    assert [report.asr(s) for s in SETTINGS] == [1.0, 1.0, 1.0]
    assert report.diagnosis().bottlenecks == ()
    assert report.malformed_judge_outputs == 0
    assert report.flagged == []


@pytest.mark.parametrize(
    "spec, expected, bottleneck",
    [
        ((0.0, 1.0, 1.0), (0.0, 1.0, 1.0), "elicitation"),
        ((1.0, 0.0, 1.0), (0.0, 0.0, 1.0), "reasoning"),
        ((1.0, 1.0, 0.0), (0.0, 0.0, 0.0), "composing"),
    ],
)
def test_single_deficit_is_recovered(templates, fast_run_config, spec, expected, bottleneck):
    ds, gateway = sim_setup(spec, n_items=20)
    report = run_oracle_eval(ds, fast_run_config, gateway, templates)
    assert tuple(report.asr(s) for s in SETTINGS) == expected
    assert report.diagnosis().bottlenecks == (bottleneck,)
    for setting in SETTINGS:
        assert report.asr(setting) == exact_setting_asr(ds, CapabilitySpec(*spec), fast_run_config.seeds, setting)


def test_capability_product_law(templates, fast_run_config):
    spec = CapabilitySpec(0.3, 0.8, 0.95)
    ds, gateway = sim_setup((0.3, 0.8, 0.95), n_items=50)
    report = run_oracle_eval(ds, fast_run_config, gateway, templates)
    for setting in SETTINGS:
        summary = report.settings[PromptSetting.parse(setting)]
        assert summary.total == 500
        assert summary.macro_asr == pytest.approx(exact_setting_asr(ds, spec, fast_run_config.seeds, setting), abs=1e-12)
        assert summary.ci_low <= expected_asr(spec, setting) <= summary.ci_high
    assert expected_asr(spec, "no-oracle") == pytest.approx(0.228)


def test_single_setting_run(templates):
    ds, gateway = sim_setup((1.0, 1.0, 1.0), n_items=3)
    report = run_oracle_eval(ds, RunConfig(settings=("no-oracle",), seeds=(0, 1)), gateway, templates)
    assert list(report.settings) == [PromptSetting.NO_ORACLE]
    assert report.diagnosis() is None
    assert report.to_dict()["diagnosis"] is None


def test_items_without_facts_are_skipped_with_a_note(templates, prompt_items):
    ds = Dataset(items=tuple(prompt_items.values()))
    gateway = make_gateway(ScriptedBackend(default_text="No"))
    report = run_oracle_eval(ds, RunConfig(seeds=(0,)), gateway, templates)
    summary = report.settings[PromptSetting.ORACLE_ELICITATION]
    assert summary.n_items == 1
    assert summary.skipped_items == ("g2",)
    assert any("g2 skipped for oracle-elicitation" in note for note in report.notes)


def test_empty_dataset_is_an_error(templates, fast_run_config):
    gateway = make_gateway(ScriptedBackend(default_text="Yes"))
    with pytest.raises(EvaluationError):
        run_oracle_eval(Dataset(), fast_run_config, gateway, templates)


def test_malformed_judge_outputs_are_counted(templates):
    ds, _ = sim_setup((1.0, 1.0, 1.0), n_items=2)
    gateway = make_gateway(ScriptedBackend(default_text="Perhaps"))
    report = run_oracle_eval(ds, RunConfig(settings=("no-oracle",), seeds=(0,)), gateway, templates)
    # two items, two conditions each
    assert report.malformed_judge_outputs == 4
    assert report.asr("no-oracle") == 0.0


def test_run_directory_round_trip(tmp_path, templates, fast_run_config):
    ds, gateway = sim_setup((0.5, 1.0, 1.0), n_items=4)
    report = run_oracle_eval(ds, fast_run_config, gateway, templates)
    run_dir = tmp_path / "run"
    paths = write_run_dir(str(run_dir), report, {"run": fast_run_config.to_dict()})
    for name in ("config.json", "manifest.json", "answers.jsonl", "verdicts.jsonl", "asr_report.json", "answers.csv"):
        assert (run_dir / name).exists()
    assert set(paths) >= {"answers", "verdicts"}

    loaded = load_run_dir(str(run_dir))
    assert loaded.settings.keys() == report.settings.keys()
    for setting, summary in report.settings.items():
        assert loaded.settings[setting].macro_asr == pytest.approx(summary.macro_asr, abs=1e-6)
    assert len(loaded.judged) == len(report.judged)
    assert [j.correct for j in loaded.judged] == [j.correct for j in report.judged]
    assert loaded.manifest["dataset_digest"] == report.manifest["dataset_digest"]


def test_audit_counts_contradictions(tmp_path):
    answers = [judged(i % 2 == 0, seed=i) for i in range(4)]
    labels_csv = tmp_path / "labels.csv"
    labels_csv.write_text(
        "item_id,setting,seed,correct\n"
        "q1,no-oracle,0,yes\n"
        "q1,no-oracle,1,0\n"
        "q1,no-oracle,2,false\n",
        encoding="utf-8",
    )
    audit = audit_judge(answers, load_human_labels(str(labels_csv)))
    assert audit.compared == 3
    assert audit.agreements == 2
    assert audit.contradictions == (("q1", "no-oracle", 2),)
    assert audit.unlabeled == 1
    assert audit.agreement_rate == pytest.approx(2 / 3)


def test_unreadable_label(tmp_path):
    labels_csv = tmp_path / "labels.csv"
    labels_csv.write_text("item_id,setting,seed,correct\nq1,no-oracle,0,perhaps\n", encoding="utf-8")
    with pytest.raises(EvaluationError):
        load_human_labels(str(labels_csv))
