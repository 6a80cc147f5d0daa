"""Per-category text descriptions: prompt templates, generation, tokenization.

Descriptions come from a pluggable client (HTTP endpoint, offline corpus, or
recorded fixtures), get cleaned and selected deterministically, and are cached
on disk so warm reruns never touch the network. The vocabulary is built from
the training-side corpus itself, keeping runs hermetic.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import requests

ENDPOINT_URL_ENV = "SKETCHALIGN_ENDPOINT_URL"
API_KEY_ENV = "SKETCHALIGN_API_KEY"

PLACEHOLDER = "{category name}"

PAD, START, END, UNK = 0, 1, 2, 3
_SPECIALS = ["<pad>", "<start>", "<end>", "<unk>"]


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    pattern: str

    def __post_init__(self):
        if PLACEHOLDER not in self.pattern:
            raise ValueError(f"template {self.id} lacks the {PLACEHOLDER!r} placeholder")


# The four built-in prompt wordings, selectable by id.
TEMPLATES: dict[int, PromptTemplate] = {
    1: PromptTemplate(1, "a photo of a {category name}."),
    2: PromptTemplate(2, "A caption describing a photo of a {category name}."),
    3: PromptTemplate(3, "What does a {category name} look like?"),
    4: PromptTemplate(4, "What are useful visual features for distinguishing a {category name} in a photo?"),
}


def render_prompt(template: PromptTemplate, category: str) -> str:
    if not category:
        raise ValueError("category must be nonempty")
    return template.pattern.replace(PLACEHOLDER, category, 1)


class DescriptionError(RuntimeError):
    """Raised when a category cannot be described (endpoint failure, empty text)."""


# ---------------------------------------------------------------------------
# clients

class HttpEndpointClient:
    """Minimal JSON-over-HTTP text client with bearer auth and retries."""

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 retries: int = 3, backoff: float = 0.5, timeout: float = 30.0):
        self.url = url or os.environ.get(ENDPOINT_URL_ENV, "")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not self.url:
            raise DescriptionError(f"no endpoint URL (set {ENDPOINT_URL_ENV} or pass --endpoint)")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout

    def fetch(self, category: str, template: PromptTemplate) -> str:
        prompt = render_prompt(template, category)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.url, json={"prompt": prompt},
                                     headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return str(resp.json().get("text", ""))
            except Exception as exc:
                last = exc
                time.sleep(self.backoff * (2 ** attempt))
        raise DescriptionError(f"endpoint failed for category {category!r}: {last}")


class OfflineCorpusClient:
    """Replays a canned corpus file keyed by (category, template id)."""

    def __init__(self, corpus_path: str | Path):
        self._blobs: dict[tuple[str, int], str] = {}
        for rec in _read_jsonl(corpus_path):
            key = (rec["category"], int(rec["template_id"]))
            self._blobs[key] = " ".join(rec["sentences"])

    def fetch(self, category: str, template: PromptTemplate) -> str:
        blob = self._blobs.get((category, template.id))
        if blob is None:
            raise DescriptionError(f"offline corpus has no entry for category {category!r} "
                                   f"template {template.id}")
        return blob


class RecordedClient:
    """Fixture client for tests: prompt -> canned raw response."""

    def __init__(self, responses: dict[str, str]):
        self.responses = dict(responses)
        self.calls = 0

    def fetch(self, category: str, template: PromptTemplate) -> str:
        self.calls += 1
        prompt = render_prompt(template, category)
        if prompt not in self.responses:
            raise DescriptionError(f"no recorded response for prompt {prompt!r} "
                                   f"(category {category!r})")
        return self.responses[prompt]


# ---------------------------------------------------------------------------
# description sets

@dataclass
class DescriptionSet:
    sentences: dict[str, list[str]]            # category -> selected sentences
    template_id: int
    source: str                                # "endpoint" | "offline" | "recorded"
    data_digest: str = ""
    generated_at: str = ""
    token_ids: dict[str, list[list[int]]] = field(default_factory=dict)

    def __post_init__(self):
        empty = sorted(c for c, s in self.sentences.items() if not s)
        if empty:
            raise DescriptionError(f"categories with no sentences: {empty}")

    @property
    def categories(self) -> list[str]:
        return sorted(self.sentences)

    def tokenize_all(self, vocab: "Vocabulary", max_len: int) -> None:
        self.token_ids = {
            cat: [tokenize(s, vocab, max_len) for s in sents]
            for cat, sents in self.sentences.items()
        }

    def category_ids(self, category: str, max_len: int) -> list[int]:
        """Concatenated per-sentence token ids for one category, capped at max_len."""
        seqs = self.token_ids.get(category)
        if seqs is None:
            raise KeyError(f"category {category!r} not tokenized (or not described)")
        flat: list[int] = []
        for seq in seqs:
            flat.extend(seq)
        return flat[:max_len]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        lines = [json.dumps({"_meta": {"version": 1, "template_id": self.template_id,
                                       "data_digest": self.data_digest}}, sort_keys=True)]
        for cat in self.categories:
            lines.append(json.dumps({"category": cat, "template_id": self.template_id,
                                     "sentences": self.sentences[cat],
                                     "source": self.source}, sort_keys=True))
        _atomic_write(path, "\n".join(lines) + "\n")
        return path


def load_descriptions(path: str | Path) -> DescriptionSet:
    sentences: dict[str, list[str]] = {}
    template_id, source, digest = 0, "offline", ""
    for rec in _read_jsonl(path, metas := []):
        sentences[rec["category"]] = list(rec["sentences"])
        template_id = int(rec["template_id"])
        source = rec.get("source", "offline")
    for meta in metas:
        digest = meta.get("data_digest", digest)
    return DescriptionSet(sentences, template_id, source, data_digest=digest)


def clean_sentences(raw: str) -> list[str]:
    """Split raw model output into deduplicated, whitespace-normalized sentences.

    Sentences shorter than three words are dropped; order of first appearance
    is kept so selection is deterministic.
    """
    parts = re.split(r"(?<=[.!?])\s+|\n+", raw.strip())
    out: list[str] = []
    seen: set[str] = set()
    for part in parts:
        s = " ".join(part.split())
        if not s:
            continue
        key = s.lower()
        if key in seen:
            continue
        if len(re.findall(r"[a-zA-Z0-9]+", s)) < 3:
            continue
        seen.add(key)
        out.append(s)
    return out


def generate_descriptions(categories: list[str], template: PromptTemplate, client,
                          k: int = 5, cache_dir: str | Path | None = None,
                          data_digest: str = "", max_workers: int = 4) -> DescriptionSet:
    """Fetch, clean, and select up to k sentences per category.

    Results are cached per (category, template id); cache hits never call the
    client. An empty post-filter result is an error, never a silent blank.
    """
    cache = Path(cache_dir) if cache_dir else None
    source = type(client).__name__.replace("Client", "").replace("HttpEndpoint", "endpoint").lower()
    if source not in ("endpoint", "offlinecorpus", "recorded"):
        source = "endpoint"
    if source == "offlinecorpus":
        source = "offline"

    lock = threading.Lock()
    selected: dict[str, list[str]] = {}

    def one(category: str) -> None:
        cached = _cache_read(cache, template.id, category)
        if cached is not None:
            with lock:
                selected[category] = cached
            return
        raw = client.fetch(category, template)
        sents = clean_sentences(raw)[:k]
        if not sents:
            raise DescriptionError(f"no usable sentences for category {category!r}")
        _cache_write(cache, template.id, category, sents)
        with lock:
            selected[category] = sents

    if max_workers > 1 and len(categories) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(one, categories))  # re-raises the first failure
    else:
        for c in categories:
            one(c)

    stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return DescriptionSet(selected, template.id, source,
                          data_digest=data_digest, generated_at=stamp)


# ---------------------------------------------------------------------------
# vocabulary and tokenization

@dataclass
class Vocabulary:
    tokens: list[str]  # index == id; specials first

    def __post_init__(self):
        if self.tokens[:4] != _SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def build_vocabulary(descriptions: DescriptionSet) -> Vocabulary:
    """Vocabulary over every word in the corpus (min frequency 1), sorted."""
    words: set[str] = set()
    for sents in descriptions.sentences.values():
        for s in sents:
            words.update(_words(s))
    return Vocabulary(_SPECIALS + sorted(words))


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Lowercase, split on non-alphanumerics, map through the vocabulary,
    truncate to max_len - 1, and append the end-of-text id."""
    ids = [vocab.id_of(w) for w in _words(text)]
    return ids[:max_len - 1] + [END]


def detokenize(ids: list[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids
                    if i not in (PAD, START, END) and 0 <= i < len(vocab))


# ---------------------------------------------------------------------------
# small file helpers

def _read_jsonl(path: str | Path, metas: list | None = None):
    records = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if "_meta" in rec:
            if metas is not None:
                metas.append(rec["_meta"])
            continue
        records.append(rec)
    return records


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(content)
    tmp.replace(path)


def _cache_read(cache: Path | None, template_id: int, category: str) -> list[str] | None:
    if cache is None:
        return None
    p = cache / f"t{template_id}" / f"{category}.json"
    if not p.exists():
        return None
    return json.loads(p.read_text())["sentences"]


def _cache_write(cache: Path | None, template_id: int, category: str, sents: list[str]) -> None:
    if cache is None:
        return
    d = cache / f"t{template_id}"
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / f"{category}.json",
                  json.dumps({"category": category, "template_id": template_id,
                              "sentences": sents}, sort_keys=True))
