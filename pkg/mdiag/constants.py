from mdiag.utils import get_version

# Program Information
PROGRAM_NAME = "mdiag"
PROGRAM_DESCRIPTION = (
    "Diagnose which answering subtask (elicitation, reasoning, composing) "
    "bottlenecks a language model on micro-domain questions."
)
VERSION = get_version()

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

# Environment
API_KEY_ENV = "MDIAG_API_KEY"
BASE_URL_ENV = "MDIAG_BASE_URL"

# Backend defaults
DEFAULT_BASE_URL = "http://localhost:8000/v1"
DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_RETRY_LIMIT = 3
DEFAULT_TIMEOUT = 120.0
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_MAX_SECONDS = 60.0
RETRIABLE_STATUS_CODES = {429, 500, 502, 503, 504}

# Sampling protocol
DEFAULT_SEEDS = tuple(range(10))
DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 1024
DEFAULT_JUDGE_MAX_TOKENS = 16
DEFAULT_KNOWLEDGE_MAX_TOKENS = 64
DEFAULT_SYNTHESIS_MAX_TOKENS = 512
DEFAULT_SFT_MAX_TOKENS = 2048
DEFAULT_SFT_CHUNK_CHARS = 2000

# Diagnosis
DEFAULT_BOTTLENECK_THRESHOLD = 0.05
DEFAULT_SUFFICIENT_THRESHOLD = 0.90
DEFAULT_MATCH_TOLERANCE = 0.05
ASR_CONFIDENCE_LEVEL = 0.99

# Prompt languages
DEFAULT_LANGUAGE = "ja"
LANGUAGE_DESCRIPTIONS = {
    "ja": "Japanese",
    "en": "English",
}

# Report formats
REPORT_FORMATS = [
    "json",
    "markdown",
    "csv",
    "html",
]

# Punctuation removed when normalizing closed-book answers.
# Slashes, hyphens and underscores stay: product identifiers depend on them.
ANSWER_PUNCTUATION = frozenset(
    ".,:;!?\"'()[]{}" "。、，：；！？「」『』（）・"
)

# Judge outputs that count as well-formed
WELL_FORMED_JUDGE_OUTPUTS = {"Yes", "yes", "No", "no"}

# Knowledge QA curation
CURATION_STATUSES = ["pending", "approved", "edited", "deleted"]
CURATION_TRANSITIONS = {
    "pending": {"approved", "edited", "deleted"},
    "approved": {"edited", "deleted"},
    "edited": {"approved", "edited", "deleted"},
    "deleted": {"pending"},
}
EVALUABLE_STATUSES = {"approved", "edited"}

# Run directory layout
RUN_FILES = {
    "config": "config.json",
    "manifest": "manifest.json",
    "answers": "answers.jsonl",
    "verdicts": "verdicts.jsonl",
    "asr_report": "asr_report.json",
    "answers_csv": "answers.csv",
    "knowledge_report": "knowledge_report.json",
    "knowledge_csv": "knowledge.csv",
    "perplexity_csv": "perplexity.csv",
}
KNOWLEDGE_QA_SUFFIX = ".knowledge.jsonl"
METADATA_KEY = "__metadata__"
