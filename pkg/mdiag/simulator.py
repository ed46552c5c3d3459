"""
Synthetic micro-domain datasets and a scripted model with independent
capability knobs for elicitation, reasoning and composing.

Every capability outcome is a hash-based coin flip on (item, seed, knob), so
the expected ASR of each prompt setting is the product of the probabilities of
the stages that setting leaves to the model, and sampled runs can be checked
against exhaustive enumeration.
"""

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass

from mdiag.data import (
    Checklist,
    Condition,
    Dataset,
    EvalItem,
    KnowledgeQA,
    OracleConclusion,
    OracleFact,
    PromptSetting,
    join_section_title,
)
from mdiag.errors import BackendError, PreconditionError
from mdiag.gateway import ScriptedBackend, TokenLogProbs
from mdiag.knowledge import qa_id_for
from mdiag.prompts import match_template

logger = logging.getLogger(__name__)

DEFAULT_VOCABULARY = (
    "WAIT_COND",
    "NEST_EXEC",
    "SPOOL_LIMIT",
    "EVENT_FILTER",
    "RETRY_WINDOW",
    "QUEUE_DEPTH",
    "AGENT_POOL",
    "LOG_ROTATE",
    "HOLD_RELEASE",
    "CALENDAR_SHIFT",
    "JOBNET_PRIORITY",
    "TRAP_FORWARD",
)
DEFAULT_PRODUCT = "Orbit Job Manager"

# Stages left to the model in each setting
REMAINING_STAGES = {
    PromptSetting.NO_ORACLE: ("elicit", "reason", "compose"),
    PromptSetting.ORACLE_ELICITATION: ("reason", "compose"),
    PromptSetting.ORACLE_REASONING: ("compose",),
}

ITEM_MARKER = re.compile(r"<!-- item:(?P<item_id>[\w-]+) -->")
TOKEN_PATTERN = re.compile(r"[A-Z][A-Z0-9]*(?:_[A-Z0-9]+)+")
_VOCABULARY_STEM = re.compile(r"[A-Z][A-Z0-9]*(?:_[A-Z0-9]+)*")
UNKNOWN_ANSWER = "UNKNOWN_PARAMETER"


def _hash_unit(text):
    """Map text to [0, 1) through the first 8 bytes of its SHA-256."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def coin_flip(item_id, seed, knob, p):
    """Deterministic Bernoulli(p) draw for one capability of one (item, seed)."""
    return _hash_unit(f"{item_id}|{seed}|{knob}") < p


@dataclass(frozen=True)
class SimConfig:
    n_items: int = 10
    hops: int = 2
    facts_per_item: int = None
    rng_seed: int = 0
    vocabulary: tuple = DEFAULT_VOCABULARY
    product: str = DEFAULT_PRODUCT

    def __post_init__(self):
        if self.facts_per_item is None:
            object.__setattr__(self, "facts_per_item", self.hops)
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if self.n_items < 1:
            raise ValueError("n_items must be at least 1")
        if self.hops < 1:
            raise ValueError("hops must be at least 1")
        if self.facts_per_item < self.hops:
            raise ValueError("facts_per_item must be at least hops")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary entries repeat")
        for stem in self.vocabulary:
            if not _VOCABULARY_STEM.fullmatch(stem):
                raise ValueError(f"vocabulary entry '{stem}' is not an upper-case identifier")
        if len(self.vocabulary) < self.hops + 1:
            raise ValueError(
                f"vocabulary has {len(self.vocabulary)} entries; "
                f"{self.hops} hops need at least {self.hops + 1}"
            )


@dataclass(frozen=True)
class CapabilitySpec:
    p_elicit: float = 1.0
    p_reason: float = 1.0
    p_compose: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    @classmethod
    def parse(cls, text):
        """Parse 'p_elicit,p_reason,p_compose'."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated probabilities, got '{text}'")
        return cls(*(float(p) for p in parts))

    def probability(self, knob):
        return getattr(self, f"p_{knob}")


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def _item_tokens(cfg, index):
    ranked = sorted(
        cfg.vocabulary,
        key=lambda stem: hashlib.sha256(f"{cfg.rng_seed}|{index}|{stem}".encode()).hexdigest(),
    )
    tokens = []
    for stem in ranked[: cfg.hops + 1]:
        number = int(hashlib.sha256(f"{cfg.rng_seed}|{index}|{stem}|n".encode()).hexdigest(), 16)
        tokens.append(f"{stem}_{number % 90 + 10}")
    return tokens


def item_id_for(index):
    return f"sim-{index:04d}"


def correct_answer(start, chain):
    return f"To change {start}, adjust " + ", then ".join(chain) + "."


def distractor_answer(start, chain, drop):
    kept = [token for i, token in enumerate(chain) if i != drop]
    if not kept:
        return f"To change {start}, adjust the related settings."
    return f"To change {start}, adjust " + ", then ".join(kept) + "."


def condition_text(token):
    return f"The answer names {token}."


def _generate_item(cfg, index):
    item_id = item_id_for(index)
    tokens = _item_tokens(cfg, index)
    start, chain = tokens[0], tokens[1:]
    product = cfg.product

    facts = []
    for hop in range(1, cfg.hops + 1):
        title = f"({hop})_{tokens[hop - 1]}" if hop == 1 else None
        facts.append(
            OracleFact(
                id=f"{item_id}/fact-{hop}",
                text=join_section_title(
                    title, f"In {product}, {tokens[hop - 1]} is governed by {tokens[hop]}."
                ),
                section_title=title,
                mandatory=True,
            )
        )
    for extra in range(cfg.hops + 1, cfg.facts_per_item + 1):
        facts.append(
            OracleFact(
                id=f"{item_id}/fact-{extra}",
                text=f"In {product}, {start} is listed in reference section {extra}.",
                mandatory=False,
            )
        )

    conclusion = OracleConclusion(
        f"In {product}, {start} is controlled through " + " and then ".join(chain) + "."
    )
    checklist = Checklist(
        id="A",
        conditions=tuple(
            Condition(id=f"c{i}", text=condition_text(token)) for i, token in enumerate(chain, 1)
        ),
    )
    item = EvalItem(
        id=item_id,
        question=f"<!-- item:{item_id} -->Which settings must I adjust to change {start} in {product}?",
        checklists=(checklist,),
        oracle_conclusions=(conclusion,),
        oracle_facts=tuple(facts),
    )
    qas = tuple(
        KnowledgeQA(
            id=qa_id_for(fact.id),
            source_fact_id=fact.id,
            question=f"In {product}, which parameter governs {tokens[hop - 1]}?",
            answer=tokens[hop],
            curation_status="approved",
        )
        for hop, fact in enumerate(facts[: cfg.hops], 1)
    )
    return item, qas


def generate_sim_dataset(cfg):
    """Pure function of cfg: the same config always yields the same dataset."""
    items, qas = [], []
    for index in range(1, cfg.n_items + 1):
        item, item_qas = _generate_item(cfg, index)
        items.append(item)
        qas.extend(item_qas)
    metadata = {
        "domain": cfg.product,
        "source": "capability simulator",
        "sim_config": {
            "n_items": cfg.n_items,
            "hops": cfg.hops,
            "facts_per_item": cfg.facts_per_item,
            "rng_seed": cfg.rng_seed,
            "vocabulary": list(cfg.vocabulary),
        },
    }
    return Dataset(items=tuple(items), knowledge_qas=tuple(qas), metadata=metadata)


# ---------------------------------------------------------------------------
# Analytic expectations
# ---------------------------------------------------------------------------


def expected_asr(spec, setting):
    probability = 1.0
    for knob in REMAINING_STAGES[PromptSetting.parse(setting)]:
        probability *= spec.probability(knob)
    return probability


def stages_succeed(item_id, seed, stages, spec):
    return all(coin_flip(item_id, seed, knob, spec.probability(knob)) for knob in stages)


def exact_setting_asr(ds, spec, seeds, setting):
    """Exhaustively enumerate the coin flips; ASR the scripted model must produce."""
    stages = REMAINING_STAGES[PromptSetting.parse(setting)]
    if not ds.items or not seeds:
        raise PreconditionError("enumeration needs items and seeds")
    per_item = [
        sum(1 for seed in seeds if stages_succeed(item.id, seed, stages, spec)) / len(seeds)
        for item in ds.items
    ]
    return sum(per_item) / len(per_item)


# ---------------------------------------------------------------------------
# Scripted model
# ---------------------------------------------------------------------------


def _contains_token(text, token):
    return re.search(rf"(?<!\w){re.escape(token)}(?!\w)", text) is not None


class SimulatedModel:
    """
    Plays every model role against a simulator dataset: answerer, judge,
    closed-book QA answerer, QA synthesizer, SFT synthesizer and scorer.
    """

    def __init__(self, dataset, spec, templates):
        self.dataset = dataset
        self.spec = spec
        self.templates = templates
        self._items = {item.id: item for item in dataset.items}
        self._facts_by_text = {fact.text: fact for fact in dataset.facts()}
        self._qas_by_question = {qa.question: qa for qa in dataset.knowledge_qas}
        self._qas_by_fact = {qa.source_fact_id: qa for qa in dataset.knowledge_qas}

    # -- answering --------------------------------------------------------

    def remaining_stages(self, prompt, item):
        if any(c.text in prompt for c in item.oracle_conclusions):
            return REMAINING_STAGES[PromptSetting.ORACLE_REASONING]
        chain_facts = [f for f in item.oracle_facts if f.mandatory] or list(item.oracle_facts)
        if chain_facts and all(f.text in prompt for f in chain_facts):
            return REMAINING_STAGES[PromptSetting.ORACLE_ELICITATION]
        return REMAINING_STAGES[PromptSetting.NO_ORACLE]

    def generate(self, prompt, seed):
        m = ITEM_MARKER.search(prompt)
        if not m or m.group("item_id") not in self._items:
            raise PreconditionError("prompt is not linked to a simulator item")
        item = self._items[m.group("item_id")]
        start = TOKEN_PATTERN.search(item.question).group(0)
        chain = [TOKEN_PATTERN.search(c.text).group(0) for c in item.checklists[0].conditions]

        if stages_succeed(item.id, seed, self.remaining_stages(prompt, item), self.spec):
            return correct_answer(start, chain)
        drop = int(_hash_unit(f"{item.id}|{seed}|drop") * len(chain))
        return distractor_answer(start, chain, drop)

    # -- judging ----------------------------------------------------------

    def judge(self, prompt):
        sections = match_template(self.templates.judge_template, prompt)
        if sections is None:
            raise PreconditionError("not a judge prompt")
        tokens = TOKEN_PATTERN.findall(sections["criteria"])
        if tokens and all(_contains_token(sections["generated_answer"], t) for t in tokens):
            return "Yes"
        return "No"

    # -- knowledge --------------------------------------------------------

    def answer_knowledge_qa(self, question):
        qa = self._qas_by_question.get(question.strip())
        if qa is None:
            return UNKNOWN_ANSWER
        if coin_flip(qa.id, 0, "elicit", self.spec.p_elicit):
            return f"{qa.answer}\nThis parameter is described in the reference manual."
        return UNKNOWN_ANSWER

    def synthesize_qa(self, fact_text):
        fact = self._facts_by_text.get(fact_text)
        qa = self._qas_by_fact.get(fact.id) if fact else None
        if qa is None:
            return "No question can be created from this document."
        return f"### Question\n{qa.question}\n\n### Answer\n{qa.answer}"

    def synthesize_sft(self, chunk):
        citation = chunk.strip().split("\n", 1)[0]
        return (
            f"Question: What does the manual say about the following passage? {citation}\n"
            f"Answer: The manual states: {citation}\n"
            f"Citation: {citation}"
        )

    def score(self, model_id, text):
        value = _memorization_logprob(self.spec.p_elicit)
        tokens = tuple(text.split())
        return TokenLogProbs(tokens=tokens, logprobs=tuple(value for _ in tokens))

    # -- dispatch ---------------------------------------------------------

    def respond(self, request):
        prompt = request.prompt
        t = self.templates
        if match_template(t.judge_template, prompt) is not None:
            return self.judge(prompt)
        if (values := match_template(t.knowledge_qa_template, prompt)) is not None:
            return self.answer_knowledge_qa(values["question"])
        if (values := match_template(t.qa_synthesis_template, prompt)) is not None:
            return self.synthesize_qa(values["fact"])
        if (values := match_template(t.sft_synthesis_template, prompt)) is not None:
            return self.synthesize_sft(values["chunk"])
        if ITEM_MARKER.search(prompt):
            return self.generate(prompt, request.seed)
        raise BackendError("simulated model cannot link this prompt to a simulator item")

    def backend(self, **kwargs):
        return ScriptedBackend(responder=self.respond, scorer=self.score, **kwargs)


def _memorization_logprob(p_elicit):
    # Certainty at p = 1, a coin toss per token at p = 0
    return math.log(0.5 + 0.5 * p_elicit)
