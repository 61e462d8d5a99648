"""Gaussian intent clusters standing in for utterance embeddings."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from lanid.data import DatasetBundle, Utterance, save_embeddings


def gaussian_intents(
    n_intents: int = 6, per_intent: int = 60, dim: int = 32, separation: float = 4.0, sigma: float = 1.0, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic clusters whose centres sit at pairwise distance ``separation * sigma``.

    Centres are scaled basis vectors, so every pair is equidistant.
    """
    if n_intents > dim:
        raise ValueError("need dim >= n_intents for equidistant centres")
    rng = np.random.default_rng(seed)
    centres = np.zeros((n_intents, dim))
    centres[np.arange(n_intents), np.arange(n_intents)] = separation * sigma / np.sqrt(2.0)
    labels = np.repeat(np.arange(n_intents), per_intent)
    points = centres[labels] + rng.normal(0.0, sigma, size=(len(labels), dim))
    return points, labels


def synthetic_bundle(labels: np.ndarray, test_labels: np.ndarray | None = None) -> DatasetBundle:
    """Bundle with placeholder texts; the test split defaults to the train utterances."""
    train = [Utterance(i, f"utterance {i}", f"intent_{c}") for i, c in enumerate(labels)]
    if test_labels is None:
        test = list(train)
    else:
        test = [Utterance(i, f"test utterance {i}", f"intent_{c}") for i, c in enumerate(test_labels)]
    return DatasetBundle(train, test)


def write_synthetic(out_dir, seed: int = 0, **kwargs) -> dict:
    """Write a dataset TSV plus train/test embedding files for CLI demos."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points, labels = gaussian_intents(seed=seed, **kwargs)
    with (out / "dataset.tsv").open("w", encoding="utf-8") as fh:
        for split in ("train", "test"):
            for i, c in enumerate(labels):
                fh.write(f"{split} utterance {i}\tintent_{c}\t{split}\n")
    save_embeddings(points, out / "train.emb")
    save_embeddings(points, out / "test.emb")
    return {
        "dataset": str(out / "dataset.tsv"),
        "train_embeddings": str(out / "train.emb"),
        "test_embeddings": str(out / "test.emb"),
    }
