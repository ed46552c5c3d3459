import argparse
import logging
import os
import sys

from mdiag.config import load_harness_config
from mdiag.constants import (
    CURATION_STATUSES,
    DEFAULT_SFT_CHUNK_CHARS,
    EXIT_OK,
    EXIT_USAGE,
    LANGUAGE_DESCRIPTIONS,
    PROGRAM_DESCRIPTION,
    PROGRAM_NAME,
    REPORT_FORMATS,
    RUN_FILES,
    VERSION,
)
from mdiag.data import (
    SETTING_ORDER,
    Dataset,
    PromptSetting,
    dataset_digest,
    dataset_stats,
    default_qa_path,
    load_dataset,
    load_knowledge_qas,
    save_dataset,
    save_knowledge_qas,
    validate_for_setting,
)
from mdiag.errors import ConfigError, HarnessError, ScoringUnsupported, UsageError
from mdiag.gateway import Gateway, OpenAICompatibleBackend, ScriptedBackend
from mdiag.knowledge import (
    PERPLEXITY_UNSUPPORTED_NOTE,
    KnowledgeReport,
    curate_qa,
    elicitation_accuracy,
    load_knowledge_report,
    measure_memorization,
    synthesize_knowledge_qas,
    write_knowledge_report,
)
from mdiag.oracle_eval import audit_judge, load_human_labels, load_run_dir, run_oracle_eval, write_run_dir
from mdiag.prompts import load_templates, template_digest
from mdiag.report import build_series_report, render_report
from mdiag.sft import chunk_manual, read_manual, save_sft_examples, synthesize_sft_examples
from mdiag.simulator import DEFAULT_PRODUCT, CapabilitySpec, SimConfig, SimulatedModel, generate_sim_dataset
from mdiag.utils import configure_logging

logger = logging.getLogger(__name__)

REPORT_EXTENSIONS = {"json": "json", "markdown": "md", "csv": "csv", "html": "html"}


class HarnessArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the harness usage code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def probability(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a number")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def parse_seeds(text):
    """'0..9' (inclusive), '0,3,5' or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            low, high = (int(part) for part in text.split("..", 1))
            if high < low:
                raise argparse.ArgumentTypeError(f"empty seed range '{text}'")
            return tuple(range(low, high + 1))
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot read seeds from '{text}'")


def parse_settings(text):
    try:
        return tuple(PromptSetting.parse(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def comma_list(text):
    return [part.strip() for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _overrides(args):
    """Configuration document built from the flags that were given."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    backend = {
        "kind": get("backend"),
        "spec": get("spec"),
        "base_url": get("base_url"),
        "max_in_flight": get("max_in_flight"),
        "retry_limit": get("retry_limit"),
        "timeout": get("timeout"),
        "cache_dir": get("cache_dir"),
    }
    if get("no_cache"):
        backend["cache"] = False
    run = {
        "settings": [s.value for s in get("settings")] if get("settings") else None,
        "seeds": list(get("seeds")) if get("seeds") else None,
        "temperature": get("temperature"),
        "answer_model": get("model"),
        "judge_model": get("judge_model"),
        "max_tokens": get("max_tokens"),
        "bottleneck_threshold": get("threshold"),
    }
    return {
        "backend": backend,
        "run": run,
        "language": get("lang"),
        "templates_manifest": get("templates"),
        "dataset": get("dataset"),
        "knowledge_qas": get("qa"),
        "knowledge": {"model": get("model"), "synth_model": get("synth_model")},
    }


def _require_dataset(config):
    if not config.dataset_path:
        raise UsageError("no dataset given (use --dataset or set 'dataset' in the config file)")
    return load_dataset(config.dataset_path, config.qa_path)


def make_gateway(config, dataset=None, templates=None):
    kind = config.backend_kind
    if kind == "openai":
        backend = OpenAICompatibleBackend(config.backend)
    elif kind == "scripted":
        if dataset is None or templates is None:
            raise ConfigError("the scripted backend needs a simulator dataset")
        spec = CapabilitySpec.parse(config.capability_spec)
        backend = SimulatedModel(dataset, spec, templates).backend()
    elif kind == "scripted-logprob":
        try:
            value = float(config.backend_argument)
        except ValueError:
            raise ConfigError(f"'{config.backend_argument}' is not a log-probability")
        backend = ScriptedBackend.with_constant_logprob(value)
    else:
        backend = ScriptedBackend.from_table_file(config.backend_argument)
    logger.info(f"Using {kind} backend")
    return Gateway(backend, config.backend)


def _progress_enabled(args):
    return not getattr(args, "quiet", False) and sys.stderr.isatty()


def _print_stats(stats):
    rounded = stats.rounded()
    print(f"Items:                          {stats.n_items}")
    print(f"Checklists per item:            {rounded.avg_checklists_per_item}")
    print(f"Conditions per checklist:       {rounded.avg_conditions_per_checklist}")
    print(f"Oracle facts per item:          {rounded.avg_facts_per_item}")
    print(f"Mandatory fact ratio:           {rounded.mandatory_fact_ratio}")
    print(f"Knowledge QAs:                  {stats.n_knowledge_qas}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_sim_generate(args, config):
    try:
        sim = SimConfig(
            n_items=args.items,
            hops=args.hops,
            facts_per_item=args.facts_per_item,
            rng_seed=args.seed,
            vocabulary=tuple(args.vocabulary) if args.vocabulary else SimConfig().vocabulary,
            product=args.product,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    ds = generate_sim_dataset(sim)
    path = os.path.join(args.output, f"{args.name}.jsonl")
    save_dataset(ds, path)
    print(f"Wrote {path}")
    print(f"Wrote {default_qa_path(path)}")
    _print_stats(dataset_stats(ds))
    return EXIT_OK


def cmd_validate(args, config):
    ds = _require_dataset(config)
    _print_stats(dataset_stats(ds))
    print(f"Dataset digest: {dataset_digest(ds)}")
    for setting in SETTING_ORDER:
        invalid = [r for r in (validate_for_setting(i, setting) for i in ds.items) if not r.valid]
        runnable = len(ds.items) - len(invalid)
        print(f"{setting.value}: {runnable}/{len(ds.items)} items runnable")
        for result in invalid:
            print(f"  {result.item_id}: {'; '.join(result.reasons)}")
    return EXIT_OK


def cmd_eval(args, config):
    ds = _require_dataset(config)
    templates = load_templates(config.language, config.templates_manifest)
    with make_gateway(config, ds, templates) as gateway:
        report = run_oracle_eval(ds, config.run, gateway, templates, progress=_progress_enabled(args))
    write_run_dir(args.output, report, config.to_public_dict())

    print(f"{'setting':<20} {'macro ASR':>10} {'micro ASR':>10}   99% interval")
    for setting, summary in report.settings.items():
        print(
            f"{setting.value:<20} {summary.macro_asr:>10.4f} {summary.micro_asr:>10.4f}   "
            f"[{summary.ci_low:.4f}, {summary.ci_high:.4f}]"
        )
    diagnosis = report.diagnosis()
    if diagnosis is not None:
        print(
            f"Gaps: elicitation {diagnosis.elicitation_gap:.4f}, reasoning "
            f"{diagnosis.reasoning_gap:.4f}, composing {diagnosis.composing_gap:.4f}"
        )
        print(f"Bottlenecks: {', '.join(diagnosis.bottlenecks) or 'none'}")
    if report.flagged:
        print(f"{len(report.flagged)} answers flagged:", file=sys.stderr)
        for entry in report.flagged:
            print(
                f"  {entry['item_id']} {entry['setting']} seed {entry['seed']}: "
                f"{', '.join(entry['reasons'])}",
                file=sys.stderr,
            )
    if report.malformed_judge_outputs:
        print(f"{report.malformed_judge_outputs} malformed judge outputs", file=sys.stderr)
    print(f"Run written to {args.output}")
    return EXIT_OK


def _knowledge_manifest(config, ds, templates=None):
    manifest = {"dataset_digest": dataset_digest(ds)}
    if templates is not None:
        manifest["template_digest"] = template_digest(templates)
    return manifest


def cmd_knowledge_synthesize(args, config):
    ds = _require_dataset(config)
    out = args.output or config.qa_path or default_qa_path(config.dataset_path)
    if os.path.exists(out) and not args.force:
        curated = [qa for qa in load_knowledge_qas(out) if qa.curation_status != "pending"]
        if curated:
            raise UsageError(f"{out} holds {len(curated)} curated QAs; pass --force to overwrite")
    templates = load_templates(config.language, config.templates_manifest)
    with make_gateway(config, ds, templates) as gateway:
        result = synthesize_knowledge_qas(
            ds.facts(), config.synth_model, gateway, templates, progress=_progress_enabled(args)
        )
    save_knowledge_qas(result.qas, out)
    print(f"Wrote {len(result.qas)} QAs to {out} ({result.unparseable} unparseable, stored as deleted)")
    if result.failed_fact_ids:
        print(f"Synthesis failed for {len(result.failed_fact_ids)} facts", file=sys.stderr)
    print("Review them with 'knowledge curate' before running 'knowledge accuracy'.")
    return EXIT_OK


def cmd_knowledge_perplexity(args, config):
    ds = _require_dataset(config)
    templates = load_templates(config.language, config.templates_manifest)
    manifest = _knowledge_manifest(config, ds)
    try:
        with make_gateway(config, ds, templates) as gateway:
            memorization = measure_memorization(
                ds.facts(), config.knowledge_model, gateway, progress=_progress_enabled(args)
            )
    except ScoringUnsupported as e:
        logger.warning(f"Perplexity skipped: {e}")
        write_knowledge_report(args.output, KnowledgeReport(manifest=manifest, notes=(PERPLEXITY_UNSUPPORTED_NOTE,)))
        print(PERPLEXITY_UNSUPPORTED_NOTE.capitalize())
        return EXIT_OK
    report = write_knowledge_report(
        args.output,
        KnowledgeReport(manifest=manifest, memorization=memorization),
    )
    print(f"Mean perplexity: {report.mean_perplexity:.6f} over {len(memorization.records)} paragraphs")
    if memorization.skipped:
        print(f"{len(memorization.skipped)} paragraphs skipped", file=sys.stderr)
    return EXIT_OK


def cmd_knowledge_accuracy(args, config):
    ds = _require_dataset(config)
    if not ds.knowledge_qas:
        raise UsageError("no knowledge QAs found; run 'knowledge synthesize' first")
    templates = load_templates(config.language, config.templates_manifest)
    with make_gateway(config, ds, templates) as gateway:
        accuracy = elicitation_accuracy(
            ds.knowledge_qas,
            config.knowledge_model,
            gateway,
            templates,
            allow_uncurated=args.allow_uncurated,
            progress=_progress_enabled(args),
        )
    write_knowledge_report(
        args.output,
        KnowledgeReport(manifest=_knowledge_manifest(config, ds, templates), elicitation=accuracy),
    )
    print(f"Elicitation accuracy: {accuracy.accuracy:.6f} over {accuracy.evaluated} QAs")
    if accuracy.skipped_deleted:
        print(f"{accuracy.skipped_deleted} deleted QAs skipped")
    flagged = [m for m in accuracy.matches if m.flag]
    if flagged:
        print(f"{len(flagged)} QAs flagged", file=sys.stderr)
    return EXIT_OK


def cmd_knowledge_curate(args, config):
    path = config.qa_path or (default_qa_path(config.dataset_path) if config.dataset_path else None)
    if not path:
        raise UsageError("no knowledge QA file given (use --qa or --dataset)")
    qas = load_knowledge_qas(path)
    if args.id is None:
        for qa in qas:
            print(f"{qa.id}\t{qa.curation_status}\t{qa.question}\t{qa.answer}")
        return EXIT_OK
    if args.status is None and args.question is None and args.answer is None:
        raise UsageError("give --status, --question or --answer")
    qas = curate_qa(qas, args.id, args.status or "edited", args.question, args.answer)
    save_knowledge_qas(qas, path)
    status = next(qa.curation_status for qa in qas if qa.id == args.id)
    print(f"{args.id}: {status}")
    return EXIT_OK


def cmd_knowledge_sft(args, config):
    if not os.path.exists(args.corpus):
        raise UsageError(f"corpus file not found: {args.corpus}")
    chunks = chunk_manual(read_manual(args.corpus), args.chunk_chars)
    if not chunks:
        raise UsageError(f"{args.corpus} contains no text")
    templates = load_templates(config.language, config.templates_manifest)
    ds = load_dataset(config.dataset_path) if config.dataset_path else Dataset()
    with make_gateway(config, ds, templates) as gateway:
        result = synthesize_sft_examples(
            chunks, config.synth_model, gateway, templates, progress=_progress_enabled(args)
        )
    save_sft_examples(result.examples, args.output)
    print(
        f"Wrote {len(result.examples)} examples from {len(chunks)} chunks to {args.output} "
        f"(citation fidelity {result.citation_fidelity:.2%})"
    )
    if result.unparseable or result.failed:
        print(
            f"{len(result.unparseable)} unparseable outputs, {len(result.failed)} failed calls",
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_report(args, config):
    tags = args.tags or [os.path.basename(os.path.normpath(d)) for d in args.runs]
    if len(tags) != len(args.runs):
        raise UsageError(f"{len(tags)} tags given for {len(args.runs)} run directories")
    results = [
        (tag, load_run_dir(run_dir), load_knowledge_report(run_dir))
        for tag, run_dir in zip(tags, args.runs)
    ]
    report = build_series_report(
        results,
        label=args.label,
        threshold=config.run.bottleneck_threshold,
        sufficient_threshold=args.sufficient_threshold,
        match_tolerance=args.tolerance,
        reference_tag=args.reference,
    )
    os.makedirs(args.output, exist_ok=True)
    for fmt in args.formats:
        path = os.path.join(args.output, f"report.{REPORT_EXTENSIONS[fmt]}")
        with open(path, "wb") as f:
            f.write(render_report(report, fmt))
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_audit(args, config):
    report = load_run_dir(args.run)
    if not report.judged:
        raise UsageError(f"{args.run} has no {RUN_FILES['verdicts']}")
    audit = audit_judge(report.judged, load_human_labels(args.labels))
    print(
        f"Compared {audit.compared} answers: {audit.agreements} agree "
        f"({audit.agreement_rate:.2%}), {len(audit.contradictions)} contradictions"
    )
    for item_id, setting, seed in audit.contradictions:
        print(f"  {item_id} {setting} seed {seed}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _backend_parent():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("backend")
    group.add_argument(
        "--backend",
        help="openai (default), scripted (simulator, needs --spec), "
        "scripted-logprob=VALUE or scripted-table=FILE",
    )
    group.add_argument("--spec", help="simulator capabilities 'p_elicit,p_reason,p_compose'")
    group.add_argument("--base-url", help="endpoint base URL (env MDIAG_BASE_URL also works)")
    group.add_argument("--max-in-flight", type=positive_int, help="concurrent requests bound")
    group.add_argument("--retry-limit", type=int, help="retries per request")
    group.add_argument("--timeout", type=float, help="request timeout in seconds")
    group.add_argument("--cache-dir", help="response cache directory")
    group.add_argument("--templates", help="template manifest JSON file")
    return parent


def _dataset_parent():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("-d", "--dataset", help="dataset file (JSON lines)")
    parent.add_argument("--qa", help="knowledge QA file (default: <dataset>.knowledge.jsonl)")
    return parent


def build_parser():
    parser = HarnessArgumentParser(prog=PROGRAM_NAME, description=PROGRAM_DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"{PROGRAM_NAME} {VERSION}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--no-cache", action="store_true", help="disable the response cache")
    parser.add_argument(
        "--lang",
        choices=sorted(LANGUAGE_DESCRIPTIONS),
        help="prompt template language (default: ja)",
    )

    backend = _backend_parent()
    dataset = _dataset_parent()
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("sim-generate", help="Generate a simulator dataset")
    gen.add_argument("--items", type=positive_int, default=10, help="number of items")
    gen.add_argument("--hops", type=positive_int, default=2, help="facts chained per conclusion")
    gen.add_argument("--facts-per-item", type=positive_int, help="facts per item (default: hops)")
    gen.add_argument("--seed", type=int, default=0, help="generation seed")
    gen.add_argument("--vocabulary", type=comma_list, help="comma-separated upper-case stems")
    gen.add_argument("--product", default=DEFAULT_PRODUCT, help="fictional product name")
    gen.add_argument("--name", default="sim", help="file stem (default: sim)")
    gen.add_argument("-o", "--output", required=True, help="output directory")
    gen.set_defaults(func=cmd_sim_generate)

    val = sub.add_parser("validate", parents=[dataset], help="Validate a dataset")
    val.set_defaults(func=cmd_validate)

    ev = sub.add_parser("eval", parents=[dataset, backend], help="Run the oracle evaluation")
    ev.add_argument("--settings", type=parse_settings, help="comma-separated prompt settings")
    ev.add_argument("--seeds", type=parse_seeds, help="'0..9' or '0,1,2' (default 0..9)")
    ev.add_argument("--temp", "--temperature", dest="temperature", type=float, help="sampling temperature")
    ev.add_argument("--model", help="answer model id")
    ev.add_argument("--judge-model", help="judge model id")
    ev.add_argument("--max-tokens", type=positive_int, help="answer token budget")
    ev.add_argument("--threshold", type=probability, help="bottleneck gap threshold")
    ev.add_argument("-o", "--output", required=True, help="run directory")
    ev.set_defaults(func=cmd_eval)

    kn = sub.add_parser("knowledge", help="Knowledge probes and QA curation")
    ksub = kn.add_subparsers(dest="knowledge_command", required=True)

    syn = ksub.add_parser("synthesize", parents=[dataset, backend], help="Synthesize closed-book QAs")
    syn.add_argument("--synth-model", help="synthesis model id")
    syn.add_argument("-o", "--output", help="QA file to write")
    syn.add_argument("--force", action="store_true", help="overwrite curated QAs")
    syn.set_defaults(func=cmd_knowledge_synthesize)

    ppl = ksub.add_parser("perplexity", parents=[dataset, backend], help="Paragraph perplexity of oracle facts")
    ppl.add_argument("--model", help="model to score with")
    ppl.add_argument("-o", "--output", required=True, help="run directory")
    ppl.set_defaults(func=cmd_knowledge_perplexity)

    acc = ksub.add_parser("accuracy", parents=[dataset, backend], help="Closed-book QA accuracy")
    acc.add_argument("--model", help="model to answer with")
    acc.add_argument("--allow-uncurated", action="store_true", help="also evaluate pending QAs")
    acc.add_argument("-o", "--output", required=True, help="run directory")
    acc.set_defaults(func=cmd_knowledge_accuracy)

    cur = ksub.add_parser("curate", parents=[dataset], help="List or curate knowledge QAs")
    cur.add_argument("--id", help="QA id to change; lists all QAs when omitted")
    cur.add_argument("--status", choices=CURATION_STATUSES, help="new curation status")
    cur.add_argument("--question", help="corrected question")
    cur.add_argument("--answer", help="corrected answer")
    cur.set_defaults(func=cmd_knowledge_curate)

    sft = ksub.add_parser("sft", parents=[dataset, backend], help="Synthesize SFT QA data from a manual")
    sft.add_argument("--corpus", required=True, help="manual text file")
    sft.add_argument("--chunk-chars", type=positive_int, default=DEFAULT_SFT_CHUNK_CHARS, help="chunk size")
    sft.add_argument("--synth-model", help="synthesis model id")
    sft.add_argument("-o", "--output", required=True, help="output JSON lines file")
    sft.set_defaults(func=cmd_knowledge_sft)

    rep = sub.add_parser("report", help="Build a series report from run directories")
    rep.add_argument("runs", nargs="+", help="run directories in series order")
    rep.add_argument("--tags", type=comma_list, help="tag per run (default: directory names)")
    rep.add_argument("--label", default="series", help="series label")
    rep.add_argument("--reference", help="reference tag (default: first)")
    rep.add_argument("--threshold", type=probability, help="bottleneck gap threshold")
    rep.add_argument("--sufficient-threshold", type=probability, default=0.90)
    rep.add_argument("--tolerance", type=probability, default=0.05, help="match tolerance")
    rep.add_argument(
        "--formats",
        type=comma_list,
        default=["json", "markdown", "csv"],
        help=f"comma-separated subset of {', '.join(REPORT_FORMATS)}",
    )
    rep.add_argument("-o", "--output", default=".", help="output directory")
    rep.set_defaults(func=cmd_report)

    aud = sub.add_parser("audit", help="Compare judge verdicts with expert labels")
    aud.add_argument("run", help="run directory")
    aud.add_argument("--labels", required=True, help="CSV: item_id,setting,seed,correct")
    aud.set_defaults(func=cmd_audit)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(
        logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    )
    try:
        if getattr(args, "formats", None):
            unknown = [f for f in args.formats if f not in REPORT_FORMATS]
            if unknown:
                raise UsageError(f"unknown report format(s): {', '.join(unknown)}")
        config = load_harness_config(_overrides(args), config_path=args.config)
        return args.func(args, config)
    except HarnessError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"{PROGRAM_NAME}: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
