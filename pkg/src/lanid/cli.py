"""Command-line entry point: ``lanid run|baseline|validate|report|synth``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from lanid.config import KCR_PRESETS, MODES, PRESETS, config_from_dict, load_config, validate_config
from lanid.runner import ConfigError, report_json, run_baseline, run_experiment
from lanid.trainer import VARIANTS

log = logging.getLogger("lanid")

# flag dest -> (section, field); section None means top level
_FLAG_FIELDS = {
    "dataset": (None, "dataset"),
    "dataset_format": (None, "dataset_format"),
    "embedding_source": (None, "embedding_source"),
    "train_embeddings": (None, "train_embeddings"),
    "test_embeddings": (None, "test_embeddings"),
    "embedding_endpoint": (None, "embedding_endpoint"),
    "mode": (None, "mode"),
    "variant": (None, "variant"),
    "templates": (None, "templates"),
    "seed": (None, "master_seed"),
    "output_dir": (None, "output_dir"),
    "knn_k": ("sampler", "K"),
    "sample_frac": ("sampler", "p"),
    "nk": ("sampler", "n_k"),
    "density_m": ("sampler", "m"),
    "min_pts": ("sampler", "min_pts"),
    "eps_quantile": ("sampler", "eps_quantile"),
    "provider": ("oracle", "provider"),
    "fallback_provider": ("oracle", "fallback_provider"),
    "llm_endpoint": ("oracle", "endpoint"),
    "model_name": ("oracle", "model_name"),
    "noise_rate": ("oracle", "noise_rate"),
    "max_retries": ("oracle", "max_retries"),
    "parallelism": ("oracle", "request_parallelism"),
    "label_cache": ("oracle", "cache_path"),
    "kn": ("train", "k_n"),
    "margin": ("train", "margin"),
    "T": ("train", "T"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"),
    "hidden_dim": ("train", "hidden_dim"),
    "layers": ("train", "layers"),
    "k": ("cluster", "k"),
    "n_init": ("cluster", "n_init"),
}


def _eps(value: str):
    if value == "auto":
        return None
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--eps takes a positive number or 'auto'") from None


def _kcr(value: str):
    if value in KCR_PRESETS:
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--kcr takes a fraction or one of {sorted(KCR_PRESETS)}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    g = p.add_argument_group("data")
    g.add_argument("--dataset")
    g.add_argument("--dataset-format", choices=["tsv", "jsonl"])
    g.add_argument("--embedding-source", choices=["file", "service"])
    g.add_argument("--train-embeddings")
    g.add_argument("--test-embeddings")
    g.add_argument("--embedding-endpoint")
    norm = g.add_mutually_exclusive_group()
    norm.add_argument("--normalize", dest="normalize", action="store_true", default=None)
    norm.add_argument("--no-normalize", dest="normalize", action="store_false")
    g = p.add_argument_group("experiment")
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--kcr", type=_kcr)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--templates", nargs="+")
    g.add_argument("--seed", type=int)
    g.add_argument("--output-dir")
    g = p.add_argument_group("sampler")
    g.add_argument("--knn-k", type=int)
    g.add_argument("--sample-frac", type=float)
    g.add_argument("--nk", type=int)
    g.add_argument("--density-m", type=int)
    g.add_argument("--min-pts", type=int)
    g.add_argument("--eps", type=_eps, default=argparse.SUPPRESS, help="DBSCAN radius or 'auto'")
    g.add_argument("--eps-quantile", type=float)
    g = p.add_argument_group("oracle")
    g.add_argument("--provider", choices=["llm", "simulated", "labeled_shortcut"])
    g.add_argument("--fallback-provider", choices=["llm", "simulated"])
    g.add_argument("--llm-endpoint")
    g.add_argument("--model-name")
    g.add_argument("--noise-rate", type=float)
    g.add_argument("--max-retries", type=int)
    g.add_argument("--parallelism", type=int)
    g.add_argument("--label-cache")
    g = p.add_argument_group("training")
    g.add_argument("--kn", type=int)
    g.add_argument("--margin", type=float)
    g.add_argument("--T", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--layers", type=int, choices=[1, 2])
    out = g.add_mutually_exclusive_group()
    out.add_argument("--normalize-output", dest="normalize_output", action="store_true", default=None)
    out.add_argument("--no-normalize-output", dest="normalize_output", action="store_false")
    g = p.add_argument_group("clustering")
    g.add_argument("--k", type=int, help="number of clusters")
    g.add_argument("--n-init", type=int)


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Nested override dict holding only the flags the user actually passed."""
    out: dict = {}
    for dest, (section, name) in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        target = out.setdefault(section, {}) if section else out
        target[name] = value
    if getattr(args, "kcr", None) is not None:
        out["kcr"] = args.kcr
    if getattr(args, "normalize", None) is not None:
        out["normalize"] = args.normalize
    if getattr(args, "normalize_output", None) is not None:
        out.setdefault("train", {})["normalize_output"] = args.normalize_output
    if hasattr(args, "eps"):
        out.setdefault("sampler", {})["eps"] = args.eps
    if getattr(args, "preset", None):
        out["preset"] = args.preset
    return out


def config_from_args(args: argparse.Namespace):
    """File values, then the preset beneath them, then flags on top."""
    overrides = overrides_from_args(args)
    if args.config:
        return load_config(args.config, overrides)
    return config_from_dict(overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanid", description="LLM-assisted new intent discovery")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "train the adapter, cluster the test split and write a run directory"),
        ("baseline", "cluster the unadapted test embeddings"),
        ("validate", "list config violations and exit"),
    ):
        _add_config_flags(sub.add_parser(name, help=text))
    rep = sub.add_parser("report", help="print the report of one or more run directories")
    rep.add_argument("run_dirs", nargs="+")
    syn = sub.add_parser("synth", help="write a Gaussian toy dataset with embeddings")
    syn.add_argument("out_dir")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--intents", type=int, default=6)
    syn.add_argument("--per-intent", type=int, default=60)
    syn.add_argument("--dim", type=int, default=32)
    syn.add_argument("--separation", type=float, default=4.0)
    return parser


def _cmd_report(run_dirs: Sequence[str]) -> int:
    rows = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            print(f"error: {path} not found", file=sys.stderr)
            return 1
        rows.append((d, json.loads(path.read_text())))
    if len(rows) == 1:
        sys.stdout.write(report_json(rows[0][1]))
        return 0
    print(f"{'run':<40} {'method':<14} {'nmi':>7} {'ari':>7} {'acc':>7}")
    for d, r in rows:
        print(f"{Path(d).name:<40} {r.get('method', '?'):<14} {r['nmi']:7.4f} {r['ari']:7.4f} {r['acc']:7.4f}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    if args.command == "report":
        return _cmd_report(args.run_dirs)
    if args.command == "synth":
        from lanid.synthetic import write_synthetic

        paths = write_synthetic(
            args.out_dir,
            seed=args.seed,
            n_intents=args.intents,
            per_intent=args.per_intent,
            dim=args.dim,
            separation=args.separation,
        )
        print(json.dumps(paths, indent=2))
        return 0
    try:
        config = config_from_args(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        problems = validate_config(config, check_files=True)
        for v in problems:
            print(v)
        if not problems:
            print("ok")
        return 1 if problems else 0
    runner = run_experiment if args.command == "run" else run_baseline
    try:
        result = runner(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any module failure ends the run with a nonzero status
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(report_json(result.report))
    print(f"artifacts: {result.run_dir}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
