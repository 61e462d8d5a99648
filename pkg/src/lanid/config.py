"""Run configuration, dataset presets and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from lanid.oracle import OracleConfig
from lanid.sampler import SamplerConfig
from lanid.trainer import VARIANTS, TrainConfig

MODES = ("unsupervised", "semi_supervised")
KCR_PRESETS = {"kcr25": 0.25, "kcr50": 0.5, "kcr75": 0.75}

# hyper-parameters per dataset; k is the ground-truth intent count
PRESETS: dict[str, dict[str, Any]] = {
    "banking": {
        "sampler": {"K": 50, "p": 0.1, "n_k": 2, "m": 5, "min_pts": 4},
        "train": {"k_n": 2, "T": 3, "epochs": 10},
        "cluster": {"k": 77},
    },
    "stackoverflow": {
        "sampler": {"K": 50, "p": 0.05, "n_k": 2, "m": 8, "min_pts": 4},
        "train": {"k_n": 2, "T": 2, "epochs": 10},
        "cluster": {"k": 20},
    },
    "mcid": {
        "sampler": {"K": 50, "p": 0.2, "n_k": 2, "m": 5, "min_pts": 4},
        "train": {"k_n": 2, "T": 3, "epochs": 20},
        "cluster": {"k": 16},
    },
}


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 0
    n_init: int = 10
    max_iter: int = 300
    tol: float = 1e-6


@dataclass
class RunConfig:
    dataset: str = ""
    dataset_format: Optional[str] = None
    embedding_source: str = "file"  # file | service
    train_embeddings: str = ""
    test_embeddings: str = ""
    embedding_endpoint: str = ""
    normalize: bool = True
    mode: str = "unsupervised"
    kcr: Optional[float] = None
    variant: str = "lanid_both"
    templates: list[str] = field(default_factory=list)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    master_seed: int = 0
    output_dir: str = "runs"

    def snapshot(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seeds(self) -> "RunConfig":
        """Copy whose module seeds all derive from ``master_seed``."""
        return replace(
            self,
            sampler=replace(self.sampler, seed=derive_seed(self.master_seed, "sampler")),
            oracle=replace(self.oracle, seed=derive_seed(self.master_seed, "oracle")),
            train=replace(self.train, seed=derive_seed(self.master_seed, "train")),
        )


def derive_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


_SECTIONS = {"sampler": SamplerConfig, "oracle": OracleConfig, "train": TrainConfig, "cluster": ClusterConfig}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig; an optional ``preset`` key seeds the nested sections."""
    raw = dict(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = _merge(PRESETS[preset], raw)
    kcr = raw.get("kcr")
    if isinstance(kcr, str):
        if kcr not in KCR_PRESETS:
            raise ValueError(f"unknown kcr preset {kcr!r}")
        raw["kcr"] = KCR_PRESETS[kcr]
    top = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            section = _SECTIONS[key]
            names = {f.name for f in fields(section)}
            bad = set(value) - names
            if bad:
                raise ValueError(f"unknown {key} keys: {sorted(bad)}")
            kwargs[key] = section(**value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(_merge(raw, overrides or {}))


def validate_config(config: RunConfig, check_files: bool = False, require_inputs: bool = True) -> list[str]:
    """Every broken invariant as "field: rule"; empty when the config is usable."""
    out = [f"sampler: {v}" for v in config.sampler.violations()]
    out += [f"oracle: {v}" for v in config.oracle.violations()]
    out += [f"train: {v}" for v in config.train.violations()]
    c = config.cluster
    if c.k < 1:
        out.append("cluster.k: must be >= 1")
    if c.n_init < 1:
        out.append("cluster.n_init: must be >= 1")
    if c.max_iter < 1:
        out.append("cluster.max_iter: must be >= 1")
    if c.tol < 0:
        out.append("cluster.tol: must be >= 0")
    if config.mode not in MODES:
        out.append(f"mode: must be one of {MODES}")
    if config.variant not in VARIANTS:
        out.append(f"variant: must be one of {VARIANTS}")
    if config.mode == "semi_supervised":
        if config.kcr is None or not 0 < config.kcr < 1:
            out.append("kcr: must lie in (0, 1) in semi_supervised mode")
    elif config.kcr is not None:
        out.append("kcr: only meaningful in semi_supervised mode")
    if config.oracle.provider == "labeled_shortcut" and config.mode != "semi_supervised":
        out.append("oracle.provider: labeled_shortcut needs semi_supervised mode")
    if config.embedding_source not in ("file", "service"):
        out.append("embedding_source: must be file or service")
    if not require_inputs:
        return out
    if config.embedding_source == "service" and not config.embedding_endpoint:
        out.append("embedding_endpoint: required when embedding_source is service")
    if not config.dataset:
        out.append("dataset: path required")
    if config.embedding_source == "file":
        for name in ("train_embeddings", "test_embeddings"):
            if not getattr(config, name):
                out.append(f"{name}: path required for file embeddings")
    if check_files:
        paths = [config.dataset] + list(config.templates)
        if config.embedding_source == "file":
            paths += [config.train_embeddings, config.test_embeddings]
        for p in paths:
            if p and not Path(p).exists():
                out.append(f"file not found: {p}")
    return out
