"""
    ArXiv query API client used by the Worker's research tool.
    Queries export.arxiv.org/api/query and parses the Atom feed with feedparser.
"""
import logging
from typing import List, Optional

import feedparser
import requests
from pydantic import BaseModel

from agent.config import ARXIV_API_URL, ARXIV_MAX_RESULTS
from utils.errors import ToolUnavailable

logger = logging.getLogger(__name__)


class ArxivEntry(BaseModel):
    title: str
    abstract: str
    link: str

    def as_citation(self) -> str:
        return f"{self.title} ({self.link})\n{self.abstract}"


def parse_feed(feed_text: str) -> List[ArxivEntry]:
    """Title, abstract and abstract-page link of every entry in an ArXiv Atom feed."""
    feed = feedparser.parse(feed_text)
    entries = []
    for entry in feed.entries:
        title = " ".join(entry.get("title", "").split())
        abstract = " ".join(entry.get("summary", "").split())
        link = entry.get("link") or entry.get("id", "")
        entries.append(ArxivEntry(title=title, abstract=abstract, link=link))
    return entries


class ArxivClient:
    def __init__(self, api_url: str = ARXIV_API_URL, timeout: float = 30.0, session: Optional[requests.Session] = None):
        """Initializes the ArXiv client; a shared requests session may be injected."""
        self.api_url = api_url
        self.timeout = timeout
        self.session = session or requests.Session()

    def search(self, query: str, max_results: int = ARXIV_MAX_RESULTS) -> List[ArxivEntry]:
        """
        Searches all fields for `query` and returns the top entries.

        Raises:
            ToolUnavailable: the API could not be reached or answered with an error
        """
        params = {"search_query": f"all:{query}", "start": 0, "max_results": max_results}
        try:
            response = self.session.get(self.api_url, params=params, timeout=self.timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            logger.error(f"ArXiv query failed for {query!r}: {str(e)}")
            raise ToolUnavailable(f"ArXiv search unavailable: {e}") from e
        return parse_feed(response.text)[:max_results]
