"""LLM sentiment/risk scoring: prompt rendering, batching, response parsing and a JSONL cache.

Any callable ``responder(prompt) -> str`` can answer prompts. Two ship here:
:class:`HttpResponder` speaks the chat-completions JSON protocol and
:class:`FixtureResponder` replays recorded responses keyed by prompt hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .data import NewsItem

log = logging.getLogger(__name__)

PROMPT_VERSION = "score_v1"
DEFAULT_CHAR_BUDGET = 24_000
DEFAULT_ASSET = "Bitcoin (BTC)"
ELLIPSIS = " [...]"
NEUTRAL = (3, 3)
API_KEY_ENV = "NEWSRL_LLM_API_KEY"


class ParseError(ValueError):
    def __init__(self, message: str, line: str | None = None) -> None:
        super().__init__(message if line is None else f"{message}: {line!r}")
        self.line = line


class PromptTooLong(ValueError):
    pass


class TransportError(RuntimeError):
    def __init__(self, message: str, retryable: bool = True, unscored: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.retryable = retryable
        self.unscored = list(unscored)


@dataclass(frozen=True)
class ScoredNews:
    news_id: str
    sentiment: int
    risk: int
    model_id: str
    prompt_hash: str

    def __post_init__(self):
        for name in ("sentiment", "risk"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 1 <= v <= 5:
                raise ValueError(f"{name} score {v!r} outside 1..5")


def prompt_template() -> str:
    return resources.files("newsrl.prompts").joinpath(f"{PROMPT_VERSION}.txt").read_text(encoding="utf-8")


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# -------------------------------------------------------------------- prompts


def _item_block(k: int, item: NewsItem, body: str | None) -> str:
    lines = [f"{k}. Title: {item.title.strip()}"]
    if body:
        lines.append(f"   Body: {body}")
    return "\n".join(lines)


def _truncate_words(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    if limit <= len(ELLIPSIS):
        return ""
    cut = text[: limit - len(ELLIPSIS)]
    if " " in cut:
        cut = cut[: cut.rfind(" ")]
    return cut.rstrip() + ELLIPSIS


def _render(header: str, items: Sequence[NewsItem], bodies: Sequence[str | None]) -> str:
    blocks = [_item_block(k, it, b) for k, (it, b) in enumerate(zip(items, bodies), start=1)]
    return header + "\n\n".join(blocks) + "\n"


def build_prompt(items: Sequence[NewsItem], char_budget: int = DEFAULT_CHAR_BUDGET, asset: str = DEFAULT_ASSET) -> str:
    """Render the scoring prompt; bodies are shortened (word boundary) until it fits."""
    if not items:
        raise ValueError("build_prompt needs at least one item")
    header = prompt_template().replace("{asset}", asset)
    bodies = [it.body.strip() for it in items]
    prompt = _render(header, items, bodies)
    if len(prompt) <= char_budget:
        return prompt
    floor = _render(header, items, [None] * len(items))
    if len(floor) > char_budget:
        raise PromptTooLong(f"{len(items)} item(s) need {len(floor)} characters with titles only; budget {char_budget}")
    # share the spare characters evenly; longer bodies give back what shorter ones do not use
    spare = char_budget - len(floor)
    overhead = len("\n   Body: ")
    order = sorted(range(len(items)), key=lambda i: len(bodies[i]))
    out: list[str | None] = [None] * len(items)
    remaining = len(order)
    for i in order:
        share = spare // remaining - overhead
        remaining -= 1
        text = _truncate_words(bodies[i], share) if share > 0 else ""
        out[i] = text or None
        if text:
            spare -= len(text) + overhead
    prompt = _render(header, items, out)
    assert len(prompt) <= char_budget
    return prompt


@dataclass(frozen=True)
class ScoreBatch:
    items: tuple[NewsItem, ...]
    rendered_prompt: str
    char_budget: int

    @property
    def prompt_hash(self) -> str:
        return prompt_hash(self.rendered_prompt)


def make_batches(items: Sequence[NewsItem], char_budget: int = DEFAULT_CHAR_BUDGET, asset: str = DEFAULT_ASSET,
                 max_items: int | None = None) -> list[ScoreBatch]:
    """Greedy packing: extend the batch while the untruncated prompt still fits."""
    header = prompt_template().replace("{asset}", asset)
    batches: list[list[NewsItem]] = []
    current: list[NewsItem] = []
    for item in items:
        candidate = current + [item]
        full = len(_render(header, candidate, [it.body.strip() for it in candidate]))
        too_many = max_items is not None and len(candidate) > max_items
        if (full <= char_budget and not too_many) or not current:
            current = candidate
        else:
            batches.append(current)
            current = [item]
    if current:
        batches.append(current)
    return [ScoreBatch(tuple(b), build_prompt(b, char_budget, asset), char_budget) for b in batches]


# -------------------------------------------------------------------- parsing

_LINE = re.compile(
    r"^\W*?(\d+)\s*[:.)\-]\s*sentiment\s*[=:]\s*([^,\s]+)\s*,\s*risk\s*[=:]\s*([^,\s]+?)\s*[.;]?\s*$",
    re.IGNORECASE,
)
_SCORE_HINT = re.compile(r"sentiment\s*[=:]", re.IGNORECASE)


def _score(text: str, line: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", text):
        raise ParseError("non-integer score", line)
    v = int(text)
    if not 1 <= v <= 5:
        raise ParseError(f"score {v} outside 1..5", line)
    return v


def _scan(response_text: str, strict: bool) -> dict[int, tuple[int, int]]:
    found: dict[int, tuple[int, int]] = {}
    for raw in response_text.splitlines():
        line = raw.strip().strip("`").strip()
        if not line or not _SCORE_HINT.search(line):
            continue
        m = _LINE.match(line)
        try:
            if m is None:
                raise ParseError("malformed score line", raw)
            idx = int(m.group(1))
            pair = (_score(m.group(2), raw), _score(m.group(3), raw))
            if idx in found:
                raise ParseError(f"duplicate index {idx}", raw)
        except ParseError:
            if strict:
                raise
            continue
        found[idx] = pair
    return found


def parse_scores(response_text: str, expected_count: int) -> list[tuple[int, int]]:
    """Extract ``expected_count`` ``<i>: sentiment=<s>, risk=<r>`` lines, indexed 1..n."""
    found = _scan(response_text, strict=True)
    if sorted(found) != list(range(1, expected_count + 1)):
        raise ParseError(f"expected items 1..{expected_count}, got indices {sorted(found)}")
    return [found[i] for i in range(1, expected_count + 1)]


def parse_scores_partial(response_text: str, expected_count: int) -> dict[int, tuple[int, int]]:
    """Best-effort parse keeping only well-formed lines with indices in 1..n."""
    return {i: p for i, p in _scan(response_text, strict=False).items() if 1 <= i <= expected_count}


# ------------------------------------------------------------------ responders


class FixtureResponder:
    """Replays canned responses from a JSONL file of ``{"prompt_hash", "response"}`` objects."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.responses: dict[str, str] = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    self.responses[obj["prompt_hash"]] = obj["response"]
        self.calls = 0

    def __call__(self, prompt: str) -> str:
        self.calls += 1
        h = prompt_hash(prompt)
        try:
            return self.responses[h]
        except KeyError:
            raise TransportError(f"no fixture response for prompt {h[:12]} in {self.path}", retryable=False) from None


class RecordingResponder:
    """Wraps a responder and keeps every (prompt_hash, response) pair for fixture files."""

    def __init__(self, inner: Callable[[str], str]) -> None:
        self.inner = inner
        self.records: dict[str, str] = {}
        self._lock = threading.Lock()

    def __call__(self, prompt: str) -> str:
        text = self.inner(prompt)
        with self._lock:
            self.records[prompt_hash(prompt)] = text
        return text

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for h in sorted(self.records):
                fh.write(json.dumps({"prompt_hash": h, "response": self.records[h]}, ensure_ascii=False) + "\n")


_ITEM_LINE = re.compile(r"^(\d+)\. Title: (.*)$")


def items_from_prompt(prompt: str) -> list[tuple[int, str, str]]:
    """Recover (index, title, body) triples from a rendered prompt."""
    out = []
    for line in prompt.splitlines():
        m = _ITEM_LINE.match(line)
        if m:
            out.append([int(m.group(1)), m.group(2), ""])
        elif line.startswith("   Body: ") and out:
            out[-1][2] = line[len("   Body: "):]
    return [tuple(x) for x in out]


class LexiconResponder:
    """Deterministic stand-in for an LLM: keyword scoring of each numbered item."""

    def __init__(self, scorer: Callable[[NewsItem], tuple[int, int]], preamble: bool = True) -> None:
        self.scorer = scorer
        self.preamble = preamble
        self.calls = 0

    def __call__(self, prompt: str) -> str:
        self.calls += 1
        lines = []
        for idx, title, body in items_from_prompt(prompt):
            s, r = self.scorer(NewsItem(0, title, body))
            lines.append(f"{idx}: sentiment={s}, risk={r}")
        text = "\n".join(lines)
        return f"Here are the scores:\n```\n{text}\n```\n" if self.preamble else text + "\n"


@dataclass
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gemini-2.5-flash"
    api_key_env: str = API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    char_budget: int = DEFAULT_CHAR_BUDGET
    max_in_flight: int = 2
    max_items: int | None = None
    asset: str = DEFAULT_ASSET
    offline: bool = False
    fixtures: str | None = None


class HttpResponder:
    """POSTs ``{base_url}/chat/completions`` with the prompt as a single user message."""

    def __init__(self, config: EndpointConfig, client=None) -> None:
        import httpx

        key = os.environ.get(config.api_key_env)
        if not key:
            raise TransportError(f"environment variable {config.api_key_env} is not set", retryable=False)
        self.config = config
        self._key = key
        self._client = client or httpx.Client(timeout=config.timeout)
        self._httpx = httpx

    def request_body(self, prompt: str) -> dict:
        return {"model": self.config.model, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}

    def __call__(self, prompt: str) -> str:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(url, json=self.request_body(prompt),
                                     headers={"Authorization": f"Bearer {self._key}"})
        except self._httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            retryable = resp.status_code == 429 or resp.status_code >= 500
            raise TransportError(f"HTTP {resp.status_code} from {url}", retryable=retryable)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {exc}", retryable=False) from exc


def make_responder(config: EndpointConfig) -> Callable[[str], str]:
    if config.offline:
        if not config.fixtures:
            raise ValueError("offline mode needs a fixture file")
        return FixtureResponder(config.fixtures)
    return HttpResponder(config)


# ---------------------------------------------------------------------- cache


class ScoreCache:
    """Append-only JSONL store of :class:`ScoredNews`, keyed by (news_id, model_id, prompt_hash).

    Lookups match on (news_id, model_id): an item scored once is not re-sent,
    whichever batch it was scored in.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._records: dict[tuple[str, str, str], ScoredNews] = {}
        self._by_item: dict[tuple[str, str], ScoredNews] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._index(ScoredNews(**json.loads(line)))

    def _index(self, rec: ScoredNews) -> None:
        self._records[(rec.news_id, rec.model_id, rec.prompt_hash)] = rec
        self._by_item.setdefault((rec.news_id, rec.model_id), rec)

    def __len__(self) -> int:
        return len(self._records)

    def get(self, news_id: str, model_id: str) -> ScoredNews | None:
        return self._by_item.get((news_id, model_id))

    def put_many(self, records: Iterable[ScoredNews]) -> int:
        new = [r for r in records if (r.news_id, r.model_id, r.prompt_hash) not in self._records]
        if not new:
            return 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            for r in new:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
                self._index(r)
        return len(new)

    def records(self) -> list[ScoredNews]:
        return list(self._records.values())


# -------------------------------------------------------------------- scoring


def _call_with_retry(responder, prompt: str, config: EndpointConfig, sleep) -> str:
    delay = config.backoff
    for attempt in range(config.max_retries + 1):
        try:
            return responder(prompt)
        except TransportError as exc:
            if not exc.retryable or attempt == config.max_retries:
                raise
            log.warning("transport error (%s); retry %d in %.1fs", exc, attempt + 1, delay)
            sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")


def _score_batch(batch: ScoreBatch, responder, config: EndpointConfig, sleep) -> list[tuple[int, int]]:
    n = len(batch.items)
    text = _call_with_retry(responder, batch.rendered_prompt, config, sleep)
    try:
        return parse_scores(text, n)
    except ParseError as first:
        log.warning("parse error (%s); retrying batch once", first)
    text = _call_with_retry(responder, batch.rendered_prompt, config, sleep)
    try:
        return parse_scores(text, n)
    except ParseError as second:
        partial = parse_scores_partial(text, n)
        failed = [batch.items[i - 1].id for i in range(1, n + 1) if i not in partial]
        log.warning("parse error after retry (%s); neutral scores for %s", second, failed)
        return [partial.get(i, NEUTRAL) for i in range(1, n + 1)]


def score_news(items: Sequence[NewsItem], config: EndpointConfig, cache: ScoreCache,
               responder: Callable[[str], str] | None = None, sleep=time.sleep) -> list[ScoredNews]:
    """Score every item, skipping cache hits; results are persisted before returning."""
    model_id = config.model
    misses = [it for it in items if cache.get(it.id, model_id) is None]
    if misses:
        responder = responder or make_responder(config)
        batches = make_batches(misses, config.char_budget, config.asset, config.max_items)
        done_ids: set[str] = set()
        with ThreadPoolExecutor(max_workers=max(1, config.max_in_flight)) as pool:
            futures = [pool.submit(_score_batch, b, responder, config, sleep) for b in batches]
            error = None
            for batch, fut in zip(batches, futures):
                try:
                    pairs = fut.result()
                except TransportError as exc:
                    error = error or exc
                    continue
                cache.put_many(ScoredNews(it.id, s, r, model_id, batch.prompt_hash)
                               for it, (s, r) in zip(batch.items, pairs))
                done_ids.update(it.id for it in batch.items)
        if error is not None:
            unscored = [it.id for it in misses if it.id not in done_ids]
            raise TransportError(f"scoring failed for {len(unscored)} item(s): {error}", retryable=False,
                                 unscored=unscored)
    return [cache.get(it.id, model_id) for it in items]
