"""Relation labels for candidate pairs from an LLM or a simulated oracle."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Callable, Optional, Sequence

import httpx
import numpy as np

from lanid.data import DatasetBundle, Utterance
from lanid.sampler import CandidatePair

log = logging.getLogger(__name__)

PROVIDERS = ("llm", "simulated", "labeled_shortcut")
API_KEY_ENV = "LANID_API_KEY"

DEFAULT_SCHEMA = "Do the following two user utterances express the same intent?"
DEFAULT_REGULATIONS = "Please just answer yes or no."
DEFAULT_PAIR_SLOT = 'Utterance 1: "{first}"\nUtterance 2: "{second}"'

_YES = re.compile(r"\byes\b", re.IGNORECASE)


class PromptError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    schema_text: str = DEFAULT_SCHEMA
    regulations_text: str = DEFAULT_REGULATIONS
    pair_slot_format: str = DEFAULT_PAIR_SLOT
    max_length: int = 4000

    def __post_init__(self):
        if "just answer yes or no" not in self.regulations_text.lower():
            raise PromptError('regulations must contain "just answer yes or no"')
        fields = [f for _, f, _, _ in string.Formatter().parse(self.pair_slot_format) if f is not None]
        if len(fields) != 2:
            raise PromptError(f"pair slot needs exactly two placeholders, found {len(fields)}")

    @property
    def digest(self) -> str:
        blob = "\x1f".join((self.schema_text, self.regulations_text, self.pair_slot_format))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_file(cls, path) -> "PromptTemplate":
        """Template file with ``[schema]``, ``[regulations]`` and ``[pair]`` sections."""
        sections: dict[str, list[str]] = {}
        current = None
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            m = re.fullmatch(r"\[(schema|regulations|pair)\]\s*", line)
            if m:
                current = m.group(1)
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        missing = {"schema", "regulations", "pair"} - sections.keys()
        if missing:
            raise PromptError(f"{path}: missing sections {sorted(missing)}")
        text = {k: "\n".join(v).strip() for k, v in sections.items()}
        return cls(text["schema"], text["regulations"], text["pair"])


@dataclass(frozen=True)
class RelationLabel:
    pair: CandidatePair
    r: int
    raw_response: str
    provider: str


@dataclass(frozen=True)
class OracleConfig:
    provider: str = "simulated"
    fallback_provider: str = "simulated"  # used by labeled_shortcut for unlabeled pairs
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-3.5-turbo"
    noise_rate: float = 0.0
    max_retries: int = 3
    backoff: float = 1.0
    request_parallelism: int = 4
    seed: int = 0
    cache_path: Optional[str] = None

    def violations(self) -> list[str]:
        out = []
        if self.provider not in PROVIDERS:
            out.append(f"provider must be one of {PROVIDERS}")
        if self.fallback_provider not in ("llm", "simulated"):
            out.append("fallback_provider must be llm or simulated")
        if not 0.0 <= self.noise_rate <= 1.0:
            out.append("noise_rate must lie in [0, 1]")
        if self.request_parallelism < 1:
            out.append("request_parallelism must be >= 1")
        if self.max_retries < 0:
            out.append("max_retries must be >= 0")
        return out


def _fill_pair(fmt: str, first: str, second: str) -> str:
    names = [f for _, f, _, _ in string.Formatter().parse(fmt) if f is not None]
    if all(n == "" or n.isdigit() for n in names):
        return fmt.format(first, second)
    return fmt.format(**{names[0]: first, names[1]: second})


def build_prompt(template: PromptTemplate, a: Utterance, b: Utterance) -> str:
    if not a.text.strip() or not b.text.strip():
        raise PromptError(f"empty utterance text in pair ({a.id}, {b.id})")
    pair_text = _fill_pair(template.pair_slot_format, a.text, b.text)
    prompt = "\n".join((template.schema_text, template.regulations_text, pair_text))
    if len(prompt) > template.max_length:
        raise PromptError(f"prompt for pair ({a.id}, {b.id}) is {len(prompt)} chars, limit {template.max_length}")
    return prompt


def parse_response(raw: str) -> int:
    """1 iff "yes" appears as a whole word, case-insensitively."""
    return 1 if _YES.search(raw or "") else 0


# --------------------------------------------------------------------------
# transports and cache
# --------------------------------------------------------------------------

Transport = Callable[[str], str]


def chat_transport(cfg: OracleConfig, client: Optional[httpx.Client] = None) -> Transport:
    """Send one user message to a chat-completion endpoint, return the reply text."""
    key = os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY", "")
    headers = {"Authorization": f"Bearer {key}"} if key else {}
    client = client or httpx.Client(timeout=60.0)

    def send(prompt: str) -> str:
        resp = client.post(
            cfg.endpoint,
            headers=headers,
            json={
                "model": cfg.model_name,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": 0,
            },
        )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    return send


def _text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def cache_key(model_name: str, template: PromptTemplate, a: str, b: str) -> str:
    ha, hb = sorted((_text_hash(a), _text_hash(b)))
    return f"{model_name}|{template.digest}|{ha}|{hb}"


class LabelCache:
    """Append-only JSONL store of (key, r, raw_response)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._store: dict[str, tuple[int, str]] = {}
        self._lock = Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._store[rec["key"]] = (int(rec["r"]), rec["raw_response"])

    def __len__(self):
        return len(self._store)

    def get(self, key: str):
        return self._store.get(key)

    def put(self, key: str, r: int, raw: str) -> None:
        with self._lock:
            if key in self._store:
                return
            self._store[key] = (r, raw)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "r": r, "raw_response": raw}) + "\n")


def simulated_flip(seed: int, a: int, b: int, noise_rate: float) -> bool:
    """Per-pair Bernoulli(noise_rate) draw, independent of query order."""
    if noise_rate <= 0.0:
        return False
    lo, hi = min(a, b), max(a, b)
    return bool(np.random.default_rng([seed, lo, hi]).random() < noise_rate)


# --------------------------------------------------------------------------
# manager
# --------------------------------------------------------------------------


@dataclass
class AnnotationStats:
    dispatched: int = 0
    cache_hits: int = 0
    shortcut: int = 0
    failed: int = 0
    failed_pairs: list = field(default_factory=list)


class OracleManager:
    """Labels candidate pairs, caching LLM answers across iterations."""

    def __init__(
        self,
        cfg: OracleConfig,
        bundle: DatasetBundle,
        template: Optional[PromptTemplate] = None,
        transport: Optional[Transport] = None,
        cache: Optional[LabelCache] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        problems = cfg.violations()
        if problems:
            raise ValueError("; ".join(problems))
        self.cfg = cfg
        self.bundle = bundle
        self.template = template or PromptTemplate()
        self._transport = transport
        self.cache = cache if cache is not None else LabelCache(cfg.cache_path)
        self.sleep = sleep
        self.stats = AnnotationStats()

    @property
    def transport(self) -> Transport:
        if self._transport is None:
            self._transport = chat_transport(self.cfg)
        return self._transport

    def _simulated(self, pair: CandidatePair) -> RelationLabel:
        ta = self.bundle.train[pair.anchor_id].label
        tb = self.bundle.train[pair.other_id].label
        if ta is None or tb is None:
            raise OracleError("simulated oracle needs ground-truth labels on train")
        r = int(ta == tb)
        if simulated_flip(self.cfg.seed, pair.anchor_id, pair.other_id, self.cfg.noise_rate):
            r = 1 - r
        return RelationLabel(pair, r, "yes" if r else "no", "simulated")

    def _ask(self, prompt: str) -> str:
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            try:
                return self.transport(prompt)
            except (httpx.HTTPError, KeyError, IndexError, ValueError, OSError) as exc:
                last = exc
                log.warning("oracle request failed (attempt %d): %s", attempt + 1, exc)
        raise OracleError(str(last))

    def _llm_batch(self, pairs: Sequence[CandidatePair]) -> list[Optional[RelationLabel]]:
        train = self.bundle.train
        results: list[Optional[RelationLabel]] = [None] * len(pairs)
        pending: dict[str, list[int]] = {}
        prompts: dict[str, str] = {}
        for idx, pair in enumerate(pairs):
            a, b = train[pair.anchor_id], train[pair.other_id]
            key = cache_key(self.cfg.model_name, self.template, a.text, b.text)
            hit = self.cache.get(key)
            if hit is not None:
                self.stats.cache_hits += 1
                results[idx] = RelationLabel(pair, hit[0], hit[1], "llm")
                continue
            if key not in pending:
                prompts[key] = build_prompt(self.template, a, b)
            pending.setdefault(key, []).append(idx)

        def run(key: str):
            try:
                raw = self._ask(prompts[key])
            except OracleError as exc:
                return key, None, str(exc)
            return key, raw, None

        keys = list(pending)
        with ThreadPoolExecutor(max_workers=self.cfg.request_parallelism) as pool:
            outcomes = list(pool.map(run, keys))
        for key, raw, err in outcomes:
            self.stats.dispatched += 1
            if raw is None:
                for idx in pending[key]:
                    self.stats.failed += 1
                    self.stats.failed_pairs.append(pairs[idx].key)
                log.error("oracle gave up on %d pair(s): %s", len(pending[key]), err)
                continue
            r = parse_response(raw)
            self.cache.put(key, r, raw)
            for idx in pending[key]:
                results[idx] = RelationLabel(pairs[idx], r, raw, "llm")
        return results

    def annotate(self, pairs: Sequence[CandidatePair]) -> list[RelationLabel]:
        """One label per pair in input order; pairs whose dispatch failed are left out."""
        if not pairs:
            raise ValueError("no pairs to annotate")
        provider = self.cfg.provider
        results: list[Optional[RelationLabel]] = [None] * len(pairs)
        routed: list[int] = []
        if provider == "labeled_shortcut":
            labeled = self.bundle.labeled_ids
            for idx, pair in enumerate(pairs):
                if pair.anchor_id in labeled and pair.other_id in labeled:
                    ta = self.bundle.train[pair.anchor_id].label
                    tb = self.bundle.train[pair.other_id].label
                    r = int(ta == tb)
                    results[idx] = RelationLabel(pair, r, "yes" if r else "no", "labeled_shortcut")
                    self.stats.shortcut += 1
                else:
                    routed.append(idx)
            provider = self.cfg.fallback_provider
        else:
            routed = list(range(len(pairs)))
        if provider == "simulated":
            for idx in routed:
                results[idx] = self._simulated(pairs[idx])
        else:
            for idx, label in zip(routed, self._llm_batch([pairs[i] for i in routed])):
                results[idx] = label
        return [r for r in results if r is not None]


def annotate_pairs(
    pairs: Sequence[CandidatePair],
    cfg: OracleConfig,
    bundle: DatasetBundle,
    **kwargs,
) -> list[RelationLabel]:
    return OracleManager(cfg, bundle, **kwargs).annotate(pairs)


def labeled_pairs(bundle: DatasetBundle, n_pairs: int, seed: int) -> list[CandidatePair]:
    """Seeded mix of same-label and different-label pairs drawn from the labeled subset."""
    ids = sorted(bundle.labeled_ids)
    if len(ids) < 2:
        raise ValueError("need at least two labeled utterances")
    rng = np.random.default_rng([seed, 7])
    by_label: dict[str, list[int]] = {}
    for i in ids:
        by_label.setdefault(bundle.train[i].label, []).append(i)
    same_groups = [g for g in by_label.values() if len(g) >= 2]
    pairs: list[CandidatePair] = []
    seen: set = set()
    for attempt in range(20 * n_pairs):
        if len(pairs) >= n_pairs:
            break
        want_same = attempt % 2 == 0 and same_groups
        if want_same:
            group = same_groups[rng.integers(len(same_groups))]
            a, b = rng.choice(group, size=2, replace=False)
        else:
            a, b = rng.choice(ids, size=2, replace=False)
        pair = CandidatePair(int(a), int(b), "knn")
        if pair.key not in seen:
            seen.add(pair.key)
            pairs.append(pair)
    return pairs


def select_schema(
    candidates: Sequence[PromptTemplate],
    bundle: DatasetBundle,
    cfg: OracleConfig,
    n_pairs: int = 50,
    transport: Optional[Transport] = None,
) -> PromptTemplate:
    """Template with the best pairwise accuracy on labeled pairs; ties go to the earlier one."""
    if not candidates:
        raise ValueError("no candidate templates")
    if bundle.mode != "semi_supervised" or not bundle.labeled_ids:
        raise ValueError("schema selection requires labels")
    if len(candidates) == 1:
        return candidates[0]
    pairs = labeled_pairs(bundle, n_pairs, cfg.seed)
    truth = [int(bundle.train[p.anchor_id].label == bundle.train[p.other_id].label) for p in pairs]
    provider = cfg.fallback_provider if cfg.provider == "labeled_shortcut" else cfg.provider
    probe = OracleConfig(**{**cfg.__dict__, "provider": provider, "cache_path": None})
    best, best_score = candidates[0], -1.0
    for template in candidates:
        manager = OracleManager(probe, bundle, template=template, transport=transport)
        labels = manager.annotate(pairs)
        got = {lab.pair.key: lab.r for lab in labels}
        correct = sum(got.get(p.key) == t for p, t in zip(pairs, truth))
        score = correct / len(pairs)
        log.info("schema %s scored %.3f", template.digest, score)
        if score > best_score:
            best, best_score = template, score
    return best
