"""End-to-end experiments: load, loop, cluster, score, write artifacts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from lanid.cluster import ClusterAssignment, predict
from lanid.config import RunConfig, derive_seed, validate_config
from lanid.data import (
    DatasetBundle,
    EmbeddingMatrix,
    fetch_embeddings,
    load_dataset,
    load_embeddings,
    make_semi_supervised,
)
from lanid.metrics import score_report
from lanid.oracle import OracleManager, PromptTemplate, select_schema
from lanid.trainer import Adapter, RunLog, run_loop

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(violations))
        self.violations = violations


@dataclass
class RunResult:
    report: dict
    assignment: ClusterAssignment
    adapter: Adapter
    log: RunLog
    run_dir: Optional[Path] = None


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def prepare(config: RunConfig) -> tuple[DatasetBundle, EmbeddingMatrix, EmbeddingMatrix]:
    bundle = load_dataset(config.dataset, config.dataset_format)
    if config.mode == "semi_supervised":
        bundle = make_semi_supervised(bundle, config.kcr, derive_seed(config.master_seed, "kcr"))
    if config.embedding_source == "service":
        train = fetch_embeddings(
            config.embedding_endpoint, [u.text for u in bundle.train], normalize=config.normalize
        )
        test = fetch_embeddings(config.embedding_endpoint, [u.text for u in bundle.test], normalize=config.normalize)
    else:
        train = load_embeddings(config.train_embeddings, len(bundle.train), config.normalize)
        test = load_embeddings(config.test_embeddings, len(bundle.test), config.normalize)
    return bundle, train.bind(bundle.train), test.bind(bundle.test)


def _templates(config: RunConfig, bundle: DatasetBundle) -> PromptTemplate:
    candidates = [PromptTemplate.from_file(p) for p in config.templates] or [PromptTemplate()]
    if len(candidates) == 1 or config.mode != "semi_supervised":
        return candidates[0]
    return select_schema(candidates, bundle, config.oracle)


def _score(config: RunConfig, adapter: Adapter, bundle: DatasetBundle, test: EmbeddingMatrix, method: str):
    assignment = predict(
        adapter,
        test,
        config.cluster.k,
        seed=config.master_seed,
        max_iter=config.cluster.max_iter,
        tol=config.cluster.tol,
        n_init=config.cluster.n_init,
    )
    truth = bundle.true_labels("test")
    if any(t is None for t in truth):
        raise ValueError("test split needs ground-truth labels for scoring")
    report = score_report(assignment, truth)
    report.update(
        method=method,
        mode=config.mode,
        inertia=float(assignment.inertia),
        kmeans_iterations=int(assignment.iterations),
    )
    return assignment, report


def run_pipeline(
    config: RunConfig,
    bundle: DatasetBundle,
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    oracle: Optional[OracleManager] = None,
    baseline: bool = False,
) -> RunResult:
    """Run on already-loaded data; no files are written."""
    problems = validate_config(config, require_inputs=False)
    if problems:
        raise ConfigError(problems)
    config = config.with_seeds()
    if baseline:
        # identity map without output normalization: the embeddings are clustered as loaded
        adapter = Adapter(test.dim, config.train.hidden_dim, config.train.layers, config.train.seed)
        assignment, report = _score(config, adapter, bundle, test, "baseline")
        run_log = RunLog()
        run_log.add(event="baseline", **report)
        return RunResult(report, assignment, adapter, run_log)
    if oracle is None:
        oracle = OracleManager(config.oracle, bundle, template=_templates(config, bundle))
    adapter, run_log = run_loop(bundle, train, config.sampler, oracle, config.train, config.variant)
    assignment, report = _score(config, adapter, bundle, test, config.variant)
    run_log.add(event="oracle", dispatched=oracle.stats.dispatched, cache_hits=oracle.stats.cache_hits,
                shortcut=oracle.stats.shortcut, failed=oracle.stats.failed)
    run_log.add(event="final", **report)
    return RunResult(report, assignment, adapter, run_log)


def _write(result: RunResult, config: RunConfig) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = Path(config.output_dir) / f"{config.digest()[:12]}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    (run_dir / "config.json").write_text(json.dumps(config.snapshot(), indent=2, sort_keys=True) + "\n")
    (run_dir / "report.json").write_text(report_json(result.report))
    result.assignment.to_csv(run_dir / "assignment.csv")
    result.adapter.save(run_dir / "adapter.ckpt", config.digest()[:32])
    (run_dir / "log.jsonl").write_text(result.log.to_jsonl())
    result.run_dir = run_dir
    return run_dir


def _checked(config: RunConfig) -> None:
    problems = validate_config(config, check_files=True)
    if problems:
        raise ConfigError(problems)


def run_experiment(config: RunConfig) -> RunResult:
    _checked(config)
    bundle, train, test = prepare(config)
    result = run_pipeline(config, bundle, train, test)
    _write(result, config)
    return result


def run_baseline(config: RunConfig) -> RunResult:
    """k-means on the unadapted test embeddings, with the same report layout."""
    _checked(config)
    bundle, train, test = prepare(config)
    result = run_pipeline(config, bundle, train, test, baseline=True)
    _write(result, config)
    return result
