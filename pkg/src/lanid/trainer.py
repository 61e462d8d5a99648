"""Triplet-margin distillation of relation labels into an embedding adapter.

The base embeddings stay frozen. A small residual adapter

    g(e) = e + W2 tanh(W1 e + b1) + b2        (two layers)
    g(e) = e + W e + b                        (one layer)
    f(e) = g(e) / |g(e)|                      (when normalize_output is set)

is trained with max(|f(a)-f(p)| - |f(a)-f(n)| + margin, 0). The output weights
start at zero, so an untrained adapter is the identity (on unit-norm inputs
when normalizing). Without the final normalization the hinge can be escaped
by inflating the whole space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from lanid.data import DatasetBundle, EmbeddingMatrix
from lanid.oracle import OracleConfig, OracleManager, RelationLabel
from lanid.sampler import SamplerConfig, dbscan, resolve_eps, sample_density_pairs, sample_knn_pairs

log = logging.getLogger(__name__)

VARIANTS = ("lanid_near", "lanid_dbscan", "lanid_both")
_CKPT_MAGIC = b"LNAD"
_CKPT_HEADER = struct.Struct("<4sIIIII32s")


class TrainingError(RuntimeError):
    pass


class TrainingWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class Triplet:
    anchor: int
    positive: int
    negative: int

    def __post_init__(self):
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise ValueError(f"triplet ids must be distinct: {self}")


@dataclass(frozen=True)
class TrainConfig:
    k_n: int = 2
    margin: float = 0.5
    T: int = 3
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 64
    hidden_dim: int = 128
    layers: int = 2
    normalize_output: bool = True
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.k_n < 1:
            out.append("k_n must be >= 1")
        if self.margin < 0:
            out.append("margin must be >= 0")
        if self.T < 1:
            out.append("T must be >= 1")
        if self.epochs < 0:
            out.append("epochs must be >= 0")
        if self.learning_rate < 0:
            out.append("learning_rate must be >= 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.layers not in (1, 2):
            out.append("layers must be 1 or 2")
        if self.hidden_dim < 1:
            out.append("hidden_dim must be >= 1")
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:32]


class Adapter:
    """Residual map over frozen embeddings; parameters live in ``params``."""

    def __init__(self, dim: int, hidden_dim: int = 128, layers: int = 2, seed: int = 0, normalize: bool = False):
        if layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")
        self.dim = dim
        self.layers = layers
        self.normalize = normalize
        self.hidden_dim = hidden_dim if layers == 2 else dim
        rng = np.random.default_rng(seed)
        if layers == 2:
            self.params = {
                "W1": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(hidden_dim, dim)),
                "b1": np.zeros(hidden_dim),
                "W2": np.zeros((dim, hidden_dim)),
                "b2": np.zeros(dim),
            }
        else:
            self.params = {"W": np.zeros((dim, dim)), "b": np.zeros(dim)}

    def copy(self) -> "Adapter":
        twin = Adapter.__new__(Adapter)
        twin.dim, twin.layers, twin.hidden_dim = self.dim, self.layers, self.hidden_dim
        twin.normalize = self.normalize
        twin.params = {k: v.copy() for k, v in self.params.items()}
        return twin

    def _pre(self, x: np.ndarray) -> np.ndarray:
        if self.layers == 2:
            h = np.tanh(x @ self.params["W1"].T + self.params["b1"])
            return x + h @ self.params["W2"].T + self.params["b2"]
        return x + x @ self.params["W"].T + self.params["b"]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "rows", x), dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"adapter expects dimension {self.dim}, got {x.shape[-1]}")
        out = self._pre(x)
        if self.normalize:
            out = out / np.linalg.norm(out, axis=-1, keepdims=True)
        return out

    def transform(self, matrix: EmbeddingMatrix) -> EmbeddingMatrix:
        return EmbeddingMatrix(self(matrix), fingerprint=matrix.fingerprint)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given dL/d(output) for each input row."""
        if self.normalize:
            g = self._pre(x)
            norm = np.linalg.norm(g, axis=1, keepdims=True)
            u = g / norm
            grad_out = (grad_out - u * (u * grad_out).sum(1, keepdims=True)) / norm
        if self.layers == 2:
            h = np.tanh(x @ self.params["W1"].T + self.params["b1"])
            dz = (grad_out @ self.params["W2"]) * (1.0 - h * h)
            return {
                "W1": dz.T @ x,
                "b1": dz.sum(0),
                "W2": grad_out.T @ h,
                "b2": grad_out.sum(0),
            }
        return {"W": grad_out.T @ x, "b": grad_out.sum(0)}

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())

    # checkpoint: header, then every parameter as little-endian float64 in key order
    def save(self, path, config_hash: str = "") -> None:
        tag = config_hash.encode("ascii")[:32].ljust(32, b"\0")
        with Path(path).open("wb") as fh:
            fh.write(
                _CKPT_HEADER.pack(_CKPT_MAGIC, self.layers, self.dim, self.hidden_dim, self.dim, int(self.normalize), tag)
            )
            for key in sorted(self.params):
                fh.write(self.params[key].astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["Adapter", str]:
        raw = Path(path).read_bytes()
        magic, layers, dim, hidden, out_dim, flags, tag = _CKPT_HEADER.unpack_from(raw)
        if magic != _CKPT_MAGIC or out_dim != dim:
            raise ValueError(f"{path}: not an adapter checkpoint")
        adapter = cls(dim, hidden, layers, normalize=bool(flags & 1))
        offset = _CKPT_HEADER.size
        for key in sorted(adapter.params):
            shape = adapter.params[key].shape
            count = int(np.prod(shape))
            chunk = raw[offset : offset + 8 * count]
            if len(chunk) != 8 * count:
                raise ValueError(f"{path}: truncated parameters")
            adapter.params[key] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
            offset += 8 * count
        return adapter, tag.rstrip(b"\0").decode("ascii")


def adapter_for(dim: int, cfg: TrainConfig) -> Adapter:
    return Adapter(dim, cfg.hidden_dim, cfg.layers, cfg.seed, normalize=cfg.normalize_output)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def triplet_loss(a, p, n, margin: float) -> float:
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    if not a.shape == p.shape == n.shape:
        raise ValueError("triplet vectors must share a shape")
    return max(float(np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin), 0.0)


def _unit(v: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # zero-distance rows get the zero subgradient
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, v / safe, 0.0)


def batch_loss_and_output_grads(fa: np.ndarray, fp: np.ndarray, fn: np.ndarray, margin: float):
    """Per-triplet losses plus dL/d(fa, fp, fn); inactive rows have zero gradient."""
    dap = fa - fp
    dan = fa - fn
    nap = np.linalg.norm(dap, axis=1, keepdims=True)
    nan_ = np.linalg.norm(dan, axis=1, keepdims=True)
    raw = nap[:, 0] - nan_[:, 0] + margin
    active = (raw > 0).astype(np.float64)[:, None]
    u_ap = _unit(dap, nap) * active
    u_an = _unit(dan, nan_) * active
    return np.maximum(raw, 0.0), u_ap - u_an, -u_ap, u_an


def triplet_loss_grad(adapter: Adapter, triplet: Triplet, base, margin: float) -> dict[str, np.ndarray]:
    x = np.asarray(getattr(base, "rows", base), dtype=np.float64)
    stacked = x[[triplet.anchor, triplet.positive, triplet.negative]]
    out = adapter(stacked)
    _, ga, gp, gn = batch_loss_and_output_grads(out[0:1], out[1:2], out[2:3], margin)
    return adapter.backward(stacked, np.vstack([ga, gp, gn]))


def batch_step(adapter: Adapter, x: np.ndarray, triplets: np.ndarray, margin: float):
    """Mean loss, active count and mean parameter gradients over a triplet batch."""
    ids = np.concatenate([triplets[:, 0], triplets[:, 1], triplets[:, 2]])
    inputs = x[ids]
    out = adapter(inputs)
    b = len(triplets)
    losses, ga, gp, gn = batch_loss_and_output_grads(out[:b], out[b : 2 * b], out[2 * b :], margin)
    grads = adapter.backward(inputs, np.vstack([ga, gp, gn]) / b)
    return float(losses.mean()), int((losses > 0).sum()), grads


# --------------------------------------------------------------------------
# triplets and training
# --------------------------------------------------------------------------


def build_triplets(
    labels: Sequence[RelationLabel], bundle: DatasetBundle, cfg: TrainConfig, iteration: int = 0
) -> list[Triplet]:
    """k_n triplets per positive pair with uniform negatives from the train split."""
    positives = [lab for lab in labels if lab.r == 1]
    if not positives:
        raise TrainingError("empty D_f: no positive pairs to build triplets from")
    n = len(bundle.train)
    if n < 3:
        raise TrainingError("need at least three training utterances")
    rng = np.random.default_rng([cfg.seed, iteration, 2])
    out = []
    for lab in positives:
        a, p = lab.pair.anchor_id, lab.pair.other_id
        for _ in range(cfg.k_n):
            for _ in range(100):
                neg = int(rng.integers(n))
                if neg != a and neg != p:
                    out.append(Triplet(a, p, neg))
                    break
            else:
                log.warning("no valid negative for pair (%d, %d) after 100 draws", a, p)
    return out


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    active_fraction: float


def train_epoch(
    adapter: Adapter, triplets: Sequence[Triplet], base, cfg: TrainConfig, epoch: int = 0
) -> EpochReport:
    """One shuffled pass of mini-batch gradient descent, updating ``adapter`` in place."""
    if not triplets:
        raise ValueError("no triplets to train on")
    x = np.asarray(getattr(base, "rows", base), dtype=np.float64)
    table = np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64)
    order = np.random.default_rng([cfg.seed, epoch, 3]).permutation(len(table))
    total_loss = 0.0
    active = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = table[order[start : start + cfg.batch_size]]
        loss, n_active, grads = batch_step(adapter, x, batch, cfg.margin)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} too high?")
        total_loss += loss * len(batch)
        active += n_active
        if cfg.learning_rate:
            for key, g in grads.items():
                adapter.params[key] -= cfg.learning_rate * g
        if not adapter.is_finite():
            raise TrainingError(f"non-finite parameters at epoch {epoch}; learning rate {cfg.learning_rate} too high?")
    return EpochReport(epoch, total_loss / len(table), active / len(table))


def mean_loss(adapter: Adapter, triplets: Sequence[Triplet], base, margin: float) -> float:
    x = np.asarray(getattr(base, "rows", base), dtype=np.float64)
    table = np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64)
    return batch_step(adapter, x, table, margin)[0]


# --------------------------------------------------------------------------
# iterative loop
# --------------------------------------------------------------------------


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **record) -> None:
        self.records.append(record)
        log.info("%s", record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def iterations(self) -> list[dict]:
        return [r for r in self.records if r.get("event") == "iteration"]


def sampling_epochs(epochs: int, T: int) -> list[int]:
    return list(range(0, epochs, T))


def run_loop(
    bundle: DatasetBundle,
    base: EmbeddingMatrix,
    sampler_cfg: SamplerConfig,
    oracle: OracleManager | OracleConfig,
    train_cfg: TrainConfig,
    variant: str = "lanid_both",
    adapter: Optional[Adapter] = None,
) -> tuple[Adapter, RunLog]:
    """Sample, annotate, extend D_f and train T epochs, until the epoch budget is spent."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    problems = sampler_cfg.violations() + train_cfg.violations()
    if problems:
        raise ValueError("; ".join(problems))
    base.check_aligned(bundle.train)
    if isinstance(oracle, OracleConfig):
        oracle = OracleManager(oracle, bundle)
    adapter = adapter or adapter_for(base.dim, train_cfg)
    run_log = RunLog()
    d_f: list[Triplet] = []
    seen: set[Triplet] = set()
    epoch = 0
    for iteration, start in enumerate(sampling_epochs(train_cfg.epochs, train_cfg.T)):
        current = adapter.transform(base)
        pairs = []
        invoked = []
        if variant in ("lanid_near", "lanid_both"):
            invoked.append("knn")
            pairs += sample_knn_pairs(current, sampler_cfg, iteration)
        n_knn = len(pairs)
        eps = None
        if variant in ("lanid_dbscan", "lanid_both"):
            invoked.append("density")
            eps = resolve_eps(current, sampler_cfg)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                density = sample_density_pairs(
                    current, sampler_cfg, iteration, dbscan(current, eps, sampler_cfg.min_pts)
                )
            for w in caught:
                log.warning("%s", w.message)
            known = {p.key for p in pairs}
            pairs += [p for p in density if p.key not in known]
        n_density = len(pairs) - n_knn

        failed_before = oracle.stats.failed
        labels = oracle.annotate(pairs) if pairs else []
        n_pos = sum(lab.r for lab in labels)
        try:
            fresh = build_triplets(labels, bundle, train_cfg, iteration)
        except TrainingError:
            if not d_f:
                raise
            warnings.warn(f"iteration {iteration} produced no positive pairs; reusing D_f", TrainingWarning)
            fresh = []
        added = 0
        for t in fresh:
            if t not in seen:
                seen.add(t)
                d_f.append(t)
                added += 1

        n_epochs = min(train_cfg.T, train_cfg.epochs - start)
        reports = [train_epoch(adapter, d_f, base, train_cfg, epoch + e) for e in range(n_epochs)]
        epoch += n_epochs
        run_log.add(
            event="iteration",
            iteration=iteration,
            epoch_start=start,
            samplers=invoked,
            pair_sources=sorted({p.source for p in pairs}),
            eps=eps,
            pairs_knn=n_knn,
            pairs_density=n_density,
            labeled=len(labels),
            failed=oracle.stats.failed - failed_before,
            positives=n_pos,
            positive_rate=n_pos / len(labels) if labels else 0.0,
            new_triplets=added,
            total_triplets=len(d_f),
            losses=[r.mean_loss for r in reports],
            active_fraction=[r.active_fraction for r in reports],
        )
    return adapter, run_log
