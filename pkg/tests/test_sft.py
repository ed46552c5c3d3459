import json

import pytest

from conftest import fixture_path
from mdiag.errors import BackendError, PreconditionError
from mdiag.prompts import match_template
from mdiag.sft import (
    chunk_manual,
    parse_sft_output,
    read_manual,
    save_sft_examples,
    synthesize_sft_examples,
)


@pytest.fixture
def manual():
    return read_manual(fixture_path("manual.txt"))


def test_read_manual(manual):
    assert manual.startswith("Orbit Job Manager Operations Guide")
    assert "WAIT_COND_12" in manual


def test_chunking_packs_whole_paragraphs(manual):
    assert chunk_manual(manual, max_chars=10**6) == [
        "Orbit Job Manager Operations Guide\n\n"
        "The scheduler service starts automatically when the host boots.\n"
        "To restart it, stop the service first and then start it again.\n\n"
        "Jobs waiting on a condition are held until the WAIT_COND_12 parameter\n"
        "is satisfied.\n\n"
        "Spool files are removed when SPOOL_LIMIT_40 is exceeded."
    ]


def test_oversized_paragraphs_stand_alone(manual):
    chunks = chunk_manual(manual, max_chars=1)
    assert len(chunks) == 4
    assert chunks[0] == "Orbit Job Manager Operations Guide"
    assert chunks[3] == "Spool files are removed when SPOOL_LIMIT_40 is exceeded."


def test_chunk_limit_must_be_positive():
    with pytest.raises(PreconditionError):
        chunk_manual("text", max_chars=0)
    assert chunk_manual("  \n\n  ") == []


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Question: Why?\nAnswer: Because.\nCitation: It is so.", ("Why?", "Because.", "It is so.")),
        ("Question：なぜ？\nAnswer：設定のため。\nCitation：設定する。", ("なぜ？", "設定のため。", "設定する。")),
        ("Question: Why?\nAnswer: Because.", None),
        ("Question: Why?\nAnswer:\nCitation: It is so.", None),
        ("", None),
        (None, None),
    ],
)
def test_parse_sft_output(raw, expected):
    assert parse_sft_output(raw) == expected


def test_synthesis_with_citation_fidelity(templates, scripted_gateway):
    chunks = ["The agent restarts nightly.", "Spool files are removed.", "Logs rotate weekly."]

    def responder(request):
        chunk = match_template(templates.sft_synthesis_template, request.prompt)["chunk"]
        if chunk.startswith("Logs"):
            return "I cannot help with that."
        citation = chunk if chunk.startswith("The agent") else "Spool files are deleted."
        return f"Question: What happens?\nAnswer: See the manual.\nCitation: {citation}"

    result = synthesize_sft_examples(chunks, "synth", scripted_gateway(responder=responder), templates)
    assert [e.chunk_index for e in result.examples] == [0, 1]
    assert [e.citation_verbatim for e in result.examples] == [True, False]
    assert result.citation_fidelity == 0.5
    assert result.unparseable == (2,)
    assert result.failed == ()


def test_synthesis_failures_are_recorded(templates, scripted_gateway):
    def responder(request):
        raise BackendError("endpoint down")

    result = synthesize_sft_examples(["a", "b"], "synth", scripted_gateway(responder=responder), templates)
    assert result.examples == ()
    assert result.failed == (0, 1)
    assert result.citation_fidelity == 0.0


def test_save_examples(tmp_path, templates, scripted_gateway):
    gateway = scripted_gateway(default_text="Question: Q\nAnswer: A\nCitation: 手順")
    result = synthesize_sft_examples(["手順を確認する。"], "synth", gateway, templates)
    path = tmp_path / "sft" / "examples.jsonl"
    save_sft_examples(result.examples, str(path))
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert rows == [
        {"chunk_index": 0, "question": "Q", "answer": "A", "citation": "手順", "citation_verbatim": True}
    ]
