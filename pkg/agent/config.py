# agent/config.py
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

PROJECT_ROOT = Path(__file__).resolve().parent.parent

# OpenAI-compatible endpoint
DSGFORGE_API_BASE = os.getenv("DSGFORGE_API_BASE")
DSGFORGE_API_KEY = os.getenv("DSGFORGE_API_KEY")
DSGFORGE_MODEL = os.getenv("DSGFORGE_MODEL", "llama-3.3-70b-instruct")

# LangSmith
LANGSMITH_TRACING = os.getenv("LANGSMITH_TRACING", "false").lower() == "true"
LANGSMITH_API_KEY = os.getenv("LANGSMITH_API_KEY")
LANGSMITH_PROJECT = os.getenv("LANGSMITH_PROJECT")
LANGSMITH_ENDPOINT = os.getenv("LANGSMITH_ENDPOINT")

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# Experiment protocol
RECURSION_LIMIT = 30
MAX_COMPLETION_TOKENS = 60000
DEFAULT_RETRY_LIMIT = 2
TRANSPORT_ATTEMPTS = 3
TRANSPORT_BACKOFF_SECONDS = 1.0
HTTP_TIMEOUT_SECONDS = float(os.getenv("DSGFORGE_HTTP_TIMEOUT", "600"))

DEFAULT_MODELS = ("llama-3.3-70b-instruct", "deepseek-r1-distill-llama-70b")
DEFAULT_SYSTEMS = ("mas", "two_as")
DEFAULT_TEMPERATURES = (0.0, 0.5, 1.0)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# Research tools
ARXIV_API_URL = "http://export.arxiv.org/api/query"
ARXIV_MAX_RESULTS = 3
RESEARCH_OFFLINE = os.getenv("DSGFORGE_OFFLINE", "false").lower() == "true"

# Metrics
M4_TIMEOUT_SECONDS = 30.0
M4_PARALLELISM = 1
M4_INTERPRETER = os.getenv("DSGFORGE_INTERPRETER", sys.executable or "python3")

# Bundled inputs
DEFAULT_CDC_PATH = PROJECT_ROOT / "data" / "cahier_des_charges.md"
DEFAULT_SCRIPT_DIR = PROJECT_ROOT / "data" / "scripted"
DEFAULT_OUTPUT_DIR = Path(os.getenv("DSGFORGE_OUTPUT_DIR", "runs"))


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Configure root logging once for command-line entry points."""
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
