"""Text-mode web access: a paged browser plus pluggable search backends.

Offline mode reads everything from a fixture directory::

    <fixtures>/pages/<url-digest>.txt
    <fixtures>/search/<source>/<query-digest>.jsonl

where both digests are the first 16 hex characters of SHA-256 over the UTF-8
url (as given) or the normalized query.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Optional, Protocol
from urllib.parse import urlparse

import httpx

from .errors import BackendUnavailable, EmptyQuery, FetchError

logger = logging.getLogger(__name__)

VIEWPORT_SIZE = 8192
SOURCES = ("web", "code_host")

_BLOCK_TAGS = frozenset(
    "p div br li ul ol tr table h1 h2 h3 h4 h5 h6 pre section article header footer blockquote hr title".split()
)
_DROP_TAGS = frozenset({"script", "style", "noscript"})


def url_digest(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()[:16]


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


def query_digest(query: str) -> str:
    return hashlib.sha256(normalize_query(query).encode("utf-8")).hexdigest()[:16]


def is_valid_url(url: str) -> bool:
    parts = urlparse(url)
    return parts.scheme in ("http", "https") and bool(parts.netloc)


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.out: list[str] = []
        self._drop = 0

    def handle_starttag(self, tag, attrs):
        if tag in _DROP_TAGS:
            self._drop += 1
        elif tag in _BLOCK_TAGS:
            self.out.append("\n")

    def handle_endtag(self, tag):
        if tag in _DROP_TAGS:
            self._drop = max(0, self._drop - 1)
        elif tag in _BLOCK_TAGS:
            self.out.append("\n")

    def handle_data(self, data):
        if not self._drop:
            self.out.append(data)


def html_to_text(html: str) -> str:
    """Drop scripts and styles, strip tags, turn block elements into newlines."""
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    text = "".join(parser.out)
    return re.sub(r"\n{3,}", "\n\n", text).strip("\n")


@dataclass
class PageView:
    url: str
    viewport_index: int
    total_viewports: int
    content: str
    status: int = 200

    @property
    def at_start(self) -> bool:
        return self.viewport_index == 0

    @property
    def at_end(self) -> bool:
        return self.viewport_index == self.total_viewports - 1

    @property
    def is_error(self) -> bool:
        return self.status >= 400

    def render(self) -> str:
        head = f"Address: {self.url}\nViewport {self.viewport_index + 1} of {self.total_viewports}"
        return f"{head}\n=======================\n{self.content}"

    def to_dict(self) -> dict:
        return {
            "url": self.url,
            "viewport_index": self.viewport_index,
            "total_viewports": self.total_viewports,
            "at_start": self.at_start,
            "at_end": self.at_end,
            "status": self.status,
            "chars": len(self.content),
        }


def split_viewports(text: str, size: int = VIEWPORT_SIZE) -> list[str]:
    if size <= 0:
        raise ValueError("viewport size must be positive")
    count = max(1, math.ceil(len(text) / size))
    return [text[i * size:(i + 1) * size] for i in range(count)]


@dataclass
class SearchResult:
    title: str
    url: str
    snippet: str = ""
    source: str = "web"

    def __post_init__(self):
        if not is_valid_url(self.url):
            raise ValueError(f"invalid result url {self.url!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    def to_dict(self) -> dict:
        return {"title": self.title, "url": self.url, "snippet": self.snippet, "source": self.source}


@dataclass
class FetchedPage:
    url: str
    text: str
    status: int = 200


class Fetcher(Protocol):
    def fetch(self, url: str) -> FetchedPage: ...


class SearchBackend(Protocol):
    def search(self, query: str, source: str) -> list[SearchResult]: ...


class FixtureFetcher:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def fetch(self, url: str) -> FetchedPage:
        base = self.root / "pages" / url_digest(url)
        for suffix, is_html in ((".txt", False), (".html", True)):
            path = base.with_suffix(suffix)
            if path.is_file():
                text = path.read_text(encoding="utf-8")
                return FetchedPage(url, html_to_text(text) if is_html else text)
        raise FetchError(url, "no offline fixture for this url")


class FixtureSearch:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def search(self, query: str, source: str) -> list[SearchResult]:
        path = self.root / "search" / source / f"{query_digest(query)}.jsonl"
        if not path.is_file():
            return []
        results = []
        for line in path.read_text(encoding="utf-8").split("\n"):
            if line.strip():
                obj = json.loads(line)
                results.append(SearchResult(obj["title"], obj["url"], obj.get("snippet", ""), source))
        return results


class HttpFetcher:
    def __init__(self, timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self._client = client or httpx.Client(timeout=timeout, follow_redirects=True)

    def fetch(self, url: str) -> FetchedPage:
        try:
            resp = self._client.get(url)
        except httpx.HTTPError as exc:
            raise FetchError(url, str(exc)) from None
        if resp.status_code >= 400:
            return FetchedPage(url, f"HTTP {resp.status_code}: {resp.reason_phrase}", resp.status_code)
        text = resp.text
        if "html" in resp.headers.get("content-type", ""):
            text = html_to_text(text)
        return FetchedPage(url, text)


class HttpSearch:
    """Generic JSON search adapter.

    ``endpoints`` maps a source to a URL accepting ``?q=``.  The response is
    either a list of ``{title, url, snippet}`` objects or a GitHub-style
    ``{"items": [{full_name, html_url, description}]}`` document.
    """

    def __init__(self, endpoints: dict[str, str], timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self.endpoints = endpoints
        self._client = client or httpx.Client(timeout=timeout)

    def search(self, query: str, source: str) -> list[SearchResult]:
        endpoint = self.endpoints.get(source)
        if not endpoint:
            raise BackendUnavailable(f"no search endpoint configured for {source}")
        try:
            resp = self._client.get(endpoint, params={"q": query})
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise BackendUnavailable(f"{source} search failed: {exc}") from None
        if isinstance(data, dict) and "items" in data:
            rows = [
                {"title": it.get("full_name", ""), "url": it.get("html_url", ""), "snippet": it.get("description") or ""}
                for it in data["items"]
            ]
        else:
            rows = data
        out = []
        for row in rows:
            try:
                out.append(SearchResult(row.get("title", ""), row.get("url", ""), row.get("snippet", ""), source))
            except ValueError:
                logger.debug("skipping result with bad url: %r", row)
        return out


@dataclass
class TextBrowser:
    """Per-task browser state; remembers extracted text of visited pages."""

    fetcher: Fetcher
    viewport_size: int = VIEWPORT_SIZE
    current: Optional[PageView] = None
    _pages: dict = field(default_factory=dict, repr=False)

    def visit(self, url: str) -> PageView:
        if not is_valid_url(url):
            raise FetchError(url, "malformed url")
        page = self.fetcher.fetch(url)
        chunks = split_viewports(page.text, self.viewport_size)
        self._pages[url] = chunks
        self.current = PageView(url, 0, len(chunks), chunks[0], page.status)
        return self.current

    def page_move(self, view: PageView, direction: str) -> PageView:
        chunks = self._pages.get(view.url)
        if chunks is None:
            chunks = split_viewports(self.fetcher.fetch(view.url).text, self.viewport_size)
            self._pages[view.url] = chunks
        step = {"up": -1, "down": 1}[direction]
        index = min(max(view.viewport_index + step, 0), len(chunks) - 1)
        self.current = PageView(view.url, index, len(chunks), chunks[index], view.status)
        return self.current

    def page_down(self) -> PageView:
        if self.current is None:
            raise FetchError("", "no page open")
        return self.page_move(self.current, "down")

    def page_up(self) -> PageView:
        if self.current is None:
            raise FetchError("", "no page open")
        return self.page_move(self.current, "up")

    def full_text(self, url: str) -> str:
        return "".join(self._pages.get(url, []))


class WebAgent:
    def __init__(self, fetcher: Fetcher, searcher: SearchBackend, viewport_size: int = VIEWPORT_SIZE):
        self.browser = TextBrowser(fetcher, viewport_size)
        self.searcher = searcher

    @classmethod
    def offline(cls, fixtures: str | Path, viewport_size: int = VIEWPORT_SIZE) -> "WebAgent":
        return cls(FixtureFetcher(fixtures), FixtureSearch(fixtures), viewport_size)

    def visit(self, url: str) -> PageView:
        return self.browser.visit(url)

    def page_move(self, view: PageView, direction: str) -> PageView:
        return self.browser.page_move(view, direction)

    def search(self, query: str, source: str = "web") -> list[SearchResult]:
        if not query or not query.strip():
            raise EmptyQuery("search query must be non-empty")
        if source not in SOURCES:
            raise ValueError(f"unknown search source {source!r}")
        return self.searcher.search(normalize_query(query), source)
