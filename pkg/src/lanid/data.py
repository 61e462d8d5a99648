"""Utterance datasets, label visibility and embedding matrices."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Callable, Iterable, Optional, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"LNEM"
_HEADER = struct.Struct("<4sII")


class DatasetError(ValueError):
    """Raised for malformed dataset or embedding files."""


@dataclass(frozen=True)
class Utterance:
    id: int
    text: str
    label: Optional[str] = None


@dataclass(frozen=True)
class IntentSets:
    known: frozenset
    unknown: frozenset

    def __post_init__(self):
        if self.known & self.unknown:
            raise ValueError(f"intents both known and unknown: {sorted(self.known & self.unknown)}")


@dataclass
class DatasetBundle:
    """Train/validation/test splits plus the labeled subset of train.

    Labels are always stored; ``mode`` only changes what ``visible_label``
    returns, so evaluation can still read ground truth.
    """

    train: list[Utterance]
    test: list[Utterance] = field(default_factory=list)
    validation: list[Utterance] = field(default_factory=list)
    labeled_subset: list[int] = field(default_factory=list)
    intents: Optional[IntentSets] = None
    mode: str = "unsupervised"

    def __post_init__(self):
        for name in ("train", "test", "validation"):
            split = getattr(self, name)
            if [u.id for u in split] != list(range(len(split))):
                raise DatasetError(f"{name} ids must be contiguous from 0")
        if self.mode not in ("unsupervised", "semi_supervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "unsupervised" and self.labeled_subset:
            raise ValueError("unsupervised mode cannot carry a labeled subset")
        known = self.intents.known if self.intents else None
        for i in self.labeled_subset:
            if not 0 <= i < len(self.train):
                raise ValueError(f"labeled id {i} outside train split")
            label = self.train[i].label
            if label is None or (known is not None and label not in known):
                raise ValueError(f"labeled id {i} has no known-intent label")
        self._labeled = frozenset(self.labeled_subset)

    @property
    def labeled_ids(self) -> frozenset:
        return self._labeled

    @property
    def unlabeled_ids(self) -> list[int]:
        return [u.id for u in self.train if u.id not in self._labeled]

    def visible_label(self, train_id: int) -> Optional[str]:
        """Training label as the learner may see it."""
        if self.mode == "unsupervised" or train_id not in self._labeled:
            return None
        return self.train[train_id].label

    def true_labels(self, split: str = "train") -> list[Optional[str]]:
        return [u.label for u in getattr(self, split)]

    def labels(self) -> set:
        return {u.label for s in (self.train, self.test, self.validation) for u in s if u.label is not None}

    def summary(self) -> dict:
        return {
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
            "labeled": len(self.labeled_subset),
            "intents": len(self.labels()),
        }


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

SPLITS = ("train", "validation", "test")


def _parse_jsonl(lines: Iterable[str]):
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
            raise DatasetError(f"line {lineno}: record needs a string 'text' field")
        label = rec.get("label")
        if label is not None and not isinstance(label, (str, int)):
            raise DatasetError(f"line {lineno}: label must be a string")
        yield lineno, rec


def _parse_tsv(lines: Iterable[str]):
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) > 3 or not cols[0]:
            raise DatasetError(f"line {lineno}: expected text<TAB>label[<TAB>split]")
        rec = {"text": cols[0]}
        if len(cols) > 1 and cols[1]:
            rec["label"] = cols[1]
        if len(cols) > 2 and cols[2]:
            rec["split"] = cols[2]
        yield lineno, rec


def load_dataset(path, format: Optional[str] = None) -> DatasetBundle:
    """Read a TSV (text, label[, split]) or JSONL dataset into a bundle.

    Records without a split go to train. Ids are assigned per split in file
    order; an explicit JSONL ``id`` must match that position.
    """
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "tsv")
    if fmt not in ("tsv", "jsonl"):
        raise ValueError(f"unsupported format {fmt!r}")
    parser = _parse_jsonl if fmt == "jsonl" else _parse_tsv
    splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    seen_ids: dict[str, set] = {s: set() for s in SPLITS}
    with path.open(encoding="utf-8") as fh:
        for lineno, rec in parser(fh):
            split = rec.get("split", "train")
            if split not in splits:
                raise DatasetError(f"line {lineno}: unknown split {split!r}")
            rows = splits[split]
            if "id" in rec:
                if rec["id"] in seen_ids[split]:
                    raise DatasetError(f"line {lineno}: duplicate id {rec['id']!r}")
                seen_ids[split].add(rec["id"])
                if rec["id"] != len(rows):
                    raise DatasetError(f"line {lineno}: id {rec['id']!r} is not the next id {len(rows)}")
            label = rec.get("label")
            rows.append(Utterance(len(rows), rec["text"], None if label is None else str(label)))
    if not any(splits.values()):
        raise DatasetError(f"{path}: no records")
    bundle = DatasetBundle(splits["train"], splits["test"], splits["validation"], mode="unsupervised")
    log.info("loaded %s: %s", path, bundle.summary())
    return bundle


def dump_dataset(bundle: DatasetBundle, path, format: Optional[str] = None) -> None:
    """Write all splits back in the same record order ``load_dataset`` reads."""
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "tsv")
    with path.open("w", encoding="utf-8") as fh:
        for split in SPLITS:
            for u in getattr(bundle, split):
                if fmt == "jsonl":
                    rec = {"id": u.id, "text": u.text, "label": u.label, "split": split}
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
                else:
                    if "\t" in u.text or "\n" in u.text:
                        raise DatasetError(f"utterance {u.id} text cannot be written as TSV")
                    fh.write(f"{u.text}\t{u.label or ''}\t{split}\n")


def make_semi_supervised(
    bundle: DatasetBundle, kcr: float, seed: int, labeled_fraction: float = 0.1
) -> DatasetBundle:
    """Semi-supervised view: ``kcr`` of the intents become known and a
    ``labeled_fraction`` of each known class in train is labeled."""
    if not 0 < kcr < 1:
        raise ValueError("kcr must lie in (0, 1)")
    intents = sorted(bundle.labels())
    if not intents:
        raise ValueError("semi-supervised mode needs labeled data")
    rng = np.random.default_rng(seed)
    order = [intents[i] for i in rng.permutation(len(intents))]
    n_known = min(max(1, int(round(kcr * len(intents)))), len(intents) - 1) if len(intents) > 1 else 1
    known = frozenset(order[:n_known])
    unknown = frozenset(order[n_known:])
    labeled: list[int] = []
    for intent in sorted(known):
        members = [u.id for u in bundle.train if u.label == intent]
        if not members:
            continue
        take = max(1, int(round(labeled_fraction * len(members))))
        labeled.extend(int(i) for i in rng.choice(members, size=take, replace=False))
    return DatasetBundle(
        bundle.train,
        bundle.test,
        bundle.validation,
        labeled_subset=sorted(labeled),
        intents=IntentSets(known, unknown),
        mode="semi_supervised",
    )


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


def fingerprint(texts: Sequence[str]) -> str:
    h = hashlib.sha256()
    for t in texts:
        h.update(hashlib.sha256(t.encode("utf-8")).digest())
    return h.hexdigest()[:16]


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    normalized: bool = False
    fingerprint: Optional[str] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise DatasetError("embedding matrix must be two-dimensional")
        if not np.isfinite(self.rows).all():
            bad = np.argwhere(~np.isfinite(self.rows))[0]
            raise DatasetError(f"non-finite embedding entry at row {bad[0]}, column {bad[1]}")
        if self.normalized:
            norms = np.linalg.norm(self.rows, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise DatasetError("rows flagged normalized do not have unit norm")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def l2_normalized(self) -> "EmbeddingMatrix":
        norms = np.linalg.norm(self.rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DatasetError(f"cannot normalize zero row {int(np.flatnonzero(norms[:, 0] == 0)[0])}")
        return EmbeddingMatrix(self.rows / norms, normalized=True, fingerprint=self.fingerprint)

    def bind(self, utterances: Sequence[Utterance]) -> "EmbeddingMatrix":
        if len(utterances) != self.n:
            raise DatasetError(f"{self.n} embedding rows for {len(utterances)} utterances")
        return EmbeddingMatrix(self.rows, self.normalized, fingerprint([u.text for u in utterances]))

    def check_aligned(self, utterances: Sequence[Utterance]) -> None:
        if len(utterances) != self.n:
            raise DatasetError(f"{self.n} embedding rows for {len(utterances)} utterances")
        if self.fingerprint is not None and self.fingerprint != fingerprint([u.text for u in utterances]):
            raise DatasetError("embedding fingerprint does not match utterances")


def save_embeddings(matrix, path) -> None:
    rows = np.asarray(getattr(matrix, "rows", matrix))
    path = Path(path)
    if path.suffix == ".csv":
        np.savetxt(path, rows, delimiter=",", fmt="%.9g")
        return
    n, d = rows.shape
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, n, d))
        fh.write(rows.astype("<f4").tobytes())


def _read_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * n * d:
        raise DatasetError(f"{path}: expected {n}x{d} float32 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)


def _read_csv(path: Path) -> np.ndarray:
    rows = []
    with path.open(newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if rows and len(rec) != len(rows[0]):
                raise DatasetError(f"{path}: line {lineno} has dimension {len(rec)}, expected {len(rows[0])}")
            try:
                rows.append([float(x) for x in rec])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def load_embeddings(path, expected_n: int, normalize: bool = True) -> EmbeddingMatrix:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    rows = _read_binary(path) if head == EMBEDDING_MAGIC else _read_csv(path)
    if rows.shape[0] != expected_n:
        raise DatasetError(f"{path}: {rows.shape[0]} rows but {expected_n} utterances")
    matrix = EmbeddingMatrix(rows)
    return matrix.l2_normalized() if normalize else matrix


# --------------------------------------------------------------------------
# remote embedding service
# --------------------------------------------------------------------------


class EmbeddingServiceError(RuntimeError):
    pass


def _text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Append-only JSONL cache of text-hash -> vector."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._store: dict[str, list[float]] = {}
        self._lock = Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._store[rec["key"]] = rec["vector"]

    def get(self, text: str):
        return self._store.get(_text_key(text))

    def put(self, text: str, vector: list[float]) -> None:
        key = _text_key(text)
        with self._lock:
            self._store[key] = vector
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "vector": vector}) + "\n")


def fetch_embeddings(
    endpoint: str,
    texts: Sequence[str],
    *,
    cache: Optional[EmbeddingCache] = None,
    client: Optional[httpx.Client] = None,
    batch_size: int = 64,
    max_retries: int = 3,
    backoff: float = 0.5,
    parallelism: int = 4,
    normalize: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> EmbeddingMatrix:
    """Embed ``texts`` through a JSON service: POST {"texts": [...]} -> {"vectors": [...]}.

    Cached texts are never re-requested. A batch whose response has the wrong
    number of vectors is an error, not a truncation.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    cache = cache if cache is not None else EmbeddingCache()
    own_client = client is None
    client = client or httpx.Client(timeout=60.0)
    missing = list(dict.fromkeys(t for t in texts if cache.get(t) is None))
    batches = [missing[i : i + batch_size] for i in range(0, len(missing), batch_size)]

    def request(batch: list[str]) -> list[list[float]]:
        last: Exception | None = None
        for attempt in range(max_retries + 1):
            if attempt:
                sleep(backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(endpoint, json={"texts": batch})
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last = exc
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if len(vectors) != len(batch):
                raise EmbeddingServiceError(f"service returned {len(vectors)} vectors for {len(batch)} texts")
            return vectors
        raise EmbeddingServiceError(f"embedding service unreachable after {max_retries} retries: {last}")

    try:
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            for batch, vectors in zip(batches, pool.map(request, batches)):
                for text, vec in zip(batch, vectors):
                    cache.put(text, [float(v) for v in vec])
    finally:
        if own_client:
            client.close()
    rows = np.array([cache.get(t) for t in texts], dtype=np.float64)
    if rows.ndim != 2:
        raise EmbeddingServiceError("service returned vectors of differing dimension")
    matrix = EmbeddingMatrix(rows, fingerprint=fingerprint(texts))
    return matrix.l2_normalized() if normalize else matrix
