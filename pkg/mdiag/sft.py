"""Synthesis of supervised fine-tuning QA triples from product manuals."""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass

from tqdm import tqdm

from mdiag.constants import DEFAULT_SFT_CHUNK_CHARS, DEFAULT_SFT_MAX_TOKENS
from mdiag.errors import BackendError, PreconditionError
from mdiag.gateway import DecodeMode, GenerationRequest
from mdiag.prompts import build_sft_synthesis_prompt
from mdiag.utils import clean_text, detect_encoding, write_text_atomic

logger = logging.getLogger(__name__)

# Models answering in Japanese often use the full-width colon
_SFT_SECTIONS = re.compile(
    r"Question\s*[:：]\s*(?P<question>.*?)\s*"
    r"Answer\s*[:：]\s*(?P<answer>.*?)\s*"
    r"Citation\s*[:：]\s*(?P<citation>.*)",
    re.DOTALL,
)


@dataclass(frozen=True)
class SFTExample:
    chunk_index: int
    question: str
    answer: str
    citation: str
    citation_verbatim: bool


@dataclass(frozen=True)
class SFTSynthesisResult:
    examples: tuple
    unparseable: tuple = ()
    failed: tuple = ()

    @property
    def citation_fidelity(self):
        if not self.examples:
            return 0.0
        return sum(1 for e in self.examples if e.citation_verbatim) / len(self.examples)


def read_manual(path):
    encoding = detect_encoding(path)
    with open(path, "r", encoding=encoding, errors="replace") as f:
        return f.read()


def chunk_manual(text, max_chars=DEFAULT_SFT_CHUNK_CHARS):
    """
    Pack whole paragraphs into chunks of at most max_chars characters.

    A paragraph longer than max_chars becomes a chunk of its own.
    """
    if max_chars < 1:
        raise PreconditionError("max_chars must be positive")
    paragraphs = [p for p in re.split(r"\n\s*\n", clean_text(text)) if p.strip()]
    chunks = []
    current = ""
    for paragraph in paragraphs:
        candidate = f"{current}\n\n{paragraph}" if current else paragraph
        if len(candidate) <= max_chars:
            current = candidate
            continue
        if current:
            chunks.append(current)
        current = paragraph
    if current:
        chunks.append(current)
    return chunks


def parse_sft_output(raw):
    """Return (question, answer, citation), or None when a section is missing or empty."""
    m = _SFT_SECTIONS.search(raw or "")
    if not m:
        return None
    parts = tuple(m.group(name).strip() for name in ("question", "answer", "citation"))
    if not all(parts):
        return None
    return parts


def _synthesize_chunk(index, chunk, model_id, gateway, templates):
    request = GenerationRequest(
        model_id=model_id,
        prompt=build_sft_synthesis_prompt(chunk, templates),
        temperature=0.0,
        max_tokens=DEFAULT_SFT_MAX_TOKENS,
        decode_mode=DecodeMode.GREEDY,
    )
    parsed = parse_sft_output(gateway.generate(request).text)
    if parsed is None:
        return None
    question, answer, citation = parsed
    return SFTExample(index, question, answer, citation, citation in chunk)


def synthesize_sft_examples(chunks, model_id, gateway, templates, progress=False):
    chunks = list(chunks)
    examples, unparseable, failed = [], [], []
    with ThreadPoolExecutor(max_workers=gateway.config.max_in_flight) as executor:
        futures = {
            executor.submit(_synthesize_chunk, i, chunk, model_id, gateway, templates): i
            for i, chunk in enumerate(chunks)
        }
        for future in tqdm(
            as_completed(futures), total=len(futures), desc="Synthesizing SFT data", disable=not progress
        ):
            index = futures[future]
            try:
                example = future.result()
            except BackendError as e:
                logger.warning(f"SFT synthesis failed for chunk {index}: {e}")
                failed.append(index)
                continue
            if example is None:
                unparseable.append(index)
            else:
                examples.append(example)

    if unparseable:
        logger.info(f"{len(unparseable)} SFT outputs lacked Question/Answer/Citation sections")
    return SFTSynthesisResult(
        examples=tuple(sorted(examples, key=lambda e: e.chunk_index)),
        unparseable=tuple(sorted(unparseable)),
        failed=tuple(sorted(failed)),
    )


def save_sft_examples(examples, path):
    write_text_atomic(
        path,
        "".join(json.dumps(asdict(e), ensure_ascii=False) + "\n" for e in examples),
    )
