"""
Research tools available to the Worker agent.
ArXiv search queries the public ArXiv API; web search is a stub that reports it is unavailable.
"""
import logging
from typing import Dict, List

from langchain_core.tools import BaseTool, tool

from agent.config import ARXIV_MAX_RESULTS, RESEARCH_OFFLINE
from utils.arxiv_client import ArxivClient
from utils.errors import ToolUnavailable

logger = logging.getLogger(__name__)

WEB_SEARCH_UNAVAILABLE = (
    "Web search is not available in this deployment; insufficient information from web sources."
)

arxiv_client = ArxivClient()


# --- ArXiv Search Tool ---
@tool
def arxiv_search(query: str, max_results: int = ARXIV_MAX_RESULTS) -> List[Dict]:
    """
    Searches ArXiv for peer-reviewed methods or equations.

    Args:
        query: Search query string
        max_results: Maximum number of results to return (default: 3)

    Returns:
        List of results containing title, abstract and link

    Raises:
        ToolUnavailable: offline mode, or the ArXiv API could not be reached
    """
    if RESEARCH_OFFLINE:
        raise ToolUnavailable("ArXiv search disabled (offline mode)")
    return [entry.model_dump() for entry in arxiv_client.search(query, max_results=max_results)]


# --- Web Search Tool ---
@tool
def web_search(query: str) -> str:
    """
    Placeholder for a web search over standards, data sheets and component specs.

    Args:
        query: Search query string

    Returns:
        A statement that no web results are available
    """
    logger.info(f"Web search requested but not available: {query!r}")
    return WEB_SEARCH_UNAVAILABLE


TOOLS: Dict[str, BaseTool] = {
    "arxiv_search": arxiv_search,
    "web_search": web_search,
}
