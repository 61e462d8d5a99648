"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``. The per-criterion lines are repeated in
the pytest terminal summary.
"""

from __future__ import annotations

import time
from dataclasses import replace

import httpx
import numpy as np
import pytest

import lanid.cluster as cluster_mod
from lanid.cluster import kmeans
from lanid.config import config_from_dict
from lanid.data import DatasetBundle, EmbeddingMatrix, Utterance
from lanid.metrics import ari, hungarian_acc, nmi
from lanid.oracle import OracleConfig, OracleManager, chat_transport, parse_response
from lanid.runner import report_json, run_pipeline
from lanid.sampler import CandidatePair, dbscan
from lanid.synthetic import gaussian_intents, synthetic_bundle
from lanid.trainer import Adapter, Triplet, mean_loss, triplet_loss, triplet_loss_grad
from reference import (
    ACCEPTANCE_LINES,
    PARSE_CASES,
    brute_dbscan,
    entropy_nmi,
    finite_difference,
    pair_counting_ari,
    permutation_acc,
    same_partition,
)

pytestmark = pytest.mark.acceptance

# every Lloyd run started while this module executes
LLOYD_TRACES: list[list[float]] = []


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module", autouse=True)
def record_lloyd():
    original = cluster_mod._lloyd

    def traced(*args, **kwargs):
        result = original(*args, **kwargs)
        LLOYD_TRACES.append(list(result.inertia_trace))
        return result

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(cluster_mod, "_lloyd", traced)
        yield


# --------------------------------------------------------------------------
# synthetic end-to-end setup
# --------------------------------------------------------------------------


def synthetic_config(noise: float = 0.0, variant: str = "lanid_both"):
    return config_from_dict(
        {
            "preset": "banking",
            "variant": variant,
            "normalize": False,
            "master_seed": 0,
            "oracle": {"provider": "simulated", "noise_rate": noise},
            "cluster": {"k": 6},
        }
    )


@pytest.fixture(scope="module")
def synthetic():
    # 6 intents, 32-D, 60 points each, centres 4 sigma apart; base embeddings are the raw points
    x, y = gaussian_intents(n_intents=6, per_intent=60, dim=32, separation=4.0, sigma=1.0, seed=0)
    emb = EmbeddingMatrix(x)
    return synthetic_bundle(y), emb


def run_synthetic(synthetic, noise=0.0, variant="lanid_both", baseline=False):
    bundle, emb = synthetic
    return run_pipeline(synthetic_config(noise, variant), bundle, emb, emb, baseline=baseline)


@pytest.fixture(scope="module")
def baseline_report(synthetic):
    return run_synthetic(synthetic, baseline=True).report


@pytest.fixture(scope="module")
def zero_epoch_report(synthetic):
    """Untrained adapter: differs from the baseline only by the output normalization."""
    bundle, emb = synthetic
    cfg = synthetic_config()
    cfg = replace(cfg, train=replace(cfg.train, epochs=0))
    return run_pipeline(cfg, bundle, emb, emb).report


@pytest.fixture(scope="module")
def clean_run(synthetic):
    start = time.perf_counter()
    result = run_synthetic(synthetic, noise=0.0)
    return result, time.perf_counter() - start


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------


def test_criterion_01_metric_oracles():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_ari = worst_nmi = 0.0
    acc_mismatch = acc_checked = 0
    for _ in range(500):
        n = int(rng.integers(2, 201))
        t = rng.integers(0, int(rng.integers(1, 9)), size=n)
        p = rng.integers(0, int(rng.integers(1, 9)), size=n)
        worst_ari = max(worst_ari, abs(ari(t, p) - pair_counting_ari(t, p)))
        worst_nmi = max(worst_nmi, abs(nmi(t, p) - entropy_nmi(t.tolist(), p.tolist())))
        if max(len(set(t)), len(set(p))) <= 6:
            acc_checked += 1
            acc_mismatch += hungarian_acc(t, p) != permutation_acc(t.tolist(), p.tolist())
    elapsed = time.perf_counter() - start
    ok = worst_ari <= 1e-12 and worst_nmi <= 1e-12 and acc_mismatch == 0 and elapsed < 10
    verdict(
        1,
        "metric oracle equivalence",
        ok,
        f"max|dARI|={worst_ari:.1e} max|dNMI|={worst_nmi:.1e} ACC mismatches={acc_mismatch}/{acc_checked} "
        f"time={elapsed:.1f}s",
    )


def test_criterion_02_dbscan_reference():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    bad = 0
    shapes = set()
    for _ in range(200):
        n = int(rng.integers(1, 301))
        d = int(rng.integers(1, 9))
        x = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0)
        scale = np.sqrt(d) * float(x.std() or 1.0)
        eps = float(rng.uniform(0.05, 1.0) * scale)
        min_pts = int(rng.integers(1, 11))
        res = dbscan(x, eps, min_pts)
        ref, ref_core = brute_dbscan(x, eps, min_pts)
        same = res.core_flags.tolist() == ref_core and same_partition(res.assignment.tolist(), ref)
        bad += not same
        shapes.add((res.n_clusters > 1, bool((res.assignment == -1).any())))
    elapsed = time.perf_counter() - start
    verdict(
        2,
        "DBSCAN reference equivalence",
        bad == 0 and elapsed < 30,
        f"mismatches={bad}/200 outcome kinds={len(shapes)} time={elapsed:.1f}s",
    )


def test_criterion_03_gradients():
    rng = np.random.default_rng(303)
    worst = 0.0
    inactive = inactive_nonzero = 0
    draws = 0
    while draws < 100:
        dim = int(rng.integers(2, 7))
        layers = int(rng.integers(1, 3))
        ad = Adapter(dim, hidden_dim=int(rng.integers(2, 8)), layers=layers, seed=int(rng.integers(1 << 30)),
                     normalize=bool(rng.integers(2)))
        for v in ad.params.values():
            v += rng.normal(scale=0.3, size=v.shape)
        x = rng.normal(size=(3, dim))
        margin = float(rng.uniform(0.0, 2.0))
        t = Triplet(0, 1, 2)
        out = ad(x)
        raw = np.linalg.norm(out[0] - out[1]) - np.linalg.norm(out[0] - out[2]) + margin
        if abs(raw) < 1e-3:
            continue  # too close to the kink for central differences
        draws += 1
        grads = triplet_loss_grad(ad, t, x, margin)
        if raw < 0:
            inactive += 1
            inactive_nonzero += any(np.any(g != 0) for g in grads.values())
            continue
        fd = finite_difference(lambda: mean_loss(ad, [t], x, margin), ad.params, step=1e-5)
        for key in grads:
            # floor keeps an analytically-zero gradient from dividing FD rounding noise by zero
            scale = max(np.abs(grads[key]).max(), np.abs(fd[key]).max(), 1e-5)
            worst = max(worst, float(np.abs(grads[key] - fd[key]).max() / scale))
    verdict(
        3,
        "gradient correctness",
        worst < 1e-4 and inactive_nonzero == 0,
        f"max rel err={worst:.1e} over {draws - inactive} active draws; "
        f"inactive draws={inactive} with nonzero grads={inactive_nonzero}",
    )


def test_criterion_04_loss_properties():
    rng = np.random.default_rng(404)
    failures = []
    for _ in range(2000):
        a, p, n, shift = rng.normal(scale=3.0, size=(4, 5))
        margin = float(rng.uniform(0, 3))
        loss = triplet_loss(a, p, n, margin)
        if loss < 0:
            failures.append("negative")
        if abs(triplet_loss(a + shift, p + shift, n + shift, margin) - loss) > 1e-9:
            failures.append("translation")
        gap = np.linalg.norm(a - n) - np.linalg.norm(a - p)
        if (gap >= margin) != (loss == 0.0):
            failures.append("hinge")
    examples = [
        triplet_loss([0.0, 0.0], [0.0, 0.0], [1.0, 0.0], 0.5) == 0.0,
        triplet_loss([0.0, 0.0], [1.0, 0.0], [0.2, 0.0], 0.5) == 1.3,
        triplet_loss([1.0, 2.0], [1.0, 2.0], [1.0, 2.0], 0.5) == 0.5,
    ]
    verdict(
        4,
        "triplet loss properties",
        not failures and all(examples),
        f"property failures={len(failures)}/6000 worked examples={sum(examples)}/3",
    )


def test_criterion_05_synthetic_recovery(clean_run, baseline_report, zero_epoch_report):
    result, elapsed = clean_run
    rep = result.report
    gain = rep["nmi"] - baseline_report["nmi"]
    checks = {
        "nmi>=base+0.05": gain >= 0.05,
        "nmi>=0.90": rep["nmi"] >= 0.90,
        "ari>=base": rep["ari"] >= baseline_report["ari"],
        "time<60s": elapsed < 60,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(
        5,
        "synthetic end-to-end recovery",
        not failed,
        f"baseline NMI={baseline_report['nmi']:.4f} ARI={baseline_report['ari']:.4f}; "
        f"LANID NMI={rep['nmi']:.4f} ARI={rep['ari']:.4f} (gain {gain:+.4f}); "
        f"untrained-adapter NMI={zero_epoch_report['nmi']:.4f}; time={elapsed:.1f}s; unmet={failed or 'none'}",
    )


def test_criterion_06_noise_robustness(synthetic, baseline_report, zero_epoch_report):
    start = time.perf_counter()
    rep = run_synthetic(synthetic, noise=0.1).report
    elapsed = time.perf_counter() - start
    verdict(
        6,
        "noise robustness",
        rep["nmi"] >= baseline_report["nmi"] and elapsed < 60,
        f"baseline NMI={baseline_report['nmi']:.4f}; LANID at noise 0.1 NMI={rep['nmi']:.4f} "
        f"({rep['nmi'] - baseline_report['nmi']:+.4f}); untrained-adapter NMI={zero_epoch_report['nmi']:.4f}; "
        f"time={elapsed:.1f}s",
    )


def test_criterion_07_variant_plumbing(synthetic):
    expected = {"lanid_near": {"knn"}, "lanid_dbscan": {"density"}, "lanid_both": {"knn", "density"}}
    seen = {}
    for variant in expected:
        its = run_synthetic(synthetic, variant=variant).log.iterations()
        sources = set().union(*(r["pair_sources"] for r in its))
        invoked = set().union(*(r["samplers"] for r in its))
        seen[variant] = (sources, invoked)
    ok = all(seen[v] == (expected[v], expected[v]) for v in expected)
    detail = "; ".join(f"{v}: sources={sorted(s)} samplers={sorted(i)}" for v, (s, i) in seen.items())
    verdict(7, "variant plumbing", ok, detail)


def test_criterion_08_determinism(synthetic, clean_run):
    first = report_json(clean_run[0].report)
    second = report_json(run_synthetic(synthetic, noise=0.0).report)
    verdict(8, "determinism", first == second, f"report JSON identical={first == second} ({len(first)} bytes)")


def test_criterion_09_kmeans_guarantees(synthetic):
    _, emb = synthetic
    x = emb.rows
    full = kmeans(x[:40], 40, seed=0, n_init=2)
    single = kmeans(x, 1, seed=0, n_init=2)
    rises = sum(
        any(b > a + 1e-9 * max(1.0, a) for a, b in zip(trace, trace[1:])) for trace in LLOYD_TRACES
    )
    ok = (
        len(LLOYD_TRACES) > 0
        and rises == 0
        and full.inertia == 0.0
        and np.allclose(single.centroids[0], x.mean(0), atol=1e-12)
    )
    verdict(
        9,
        "k-means guarantees",
        ok,
        f"Lloyd runs traced={len(LLOYD_TRACES)} with inertia rises={rises}; k=n inertia={full.inertia:.1e}; "
        f"k=1 centroid error={np.abs(single.centroids[0] - x.mean(0)).max():.1e}",
    )


def test_criterion_10_oracle_contracts():
    parse_fail = [raw for raw, want in PARSE_CASES if parse_response(raw) != want]

    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Yes."}}]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    texts = [Utterance(i, f"utterance {i}", "a" if i < 3 else "b") for i in range(6)]
    bundle = DatasetBundle(texts)
    cfg = OracleConfig(provider="llm")
    om = OracleManager(cfg, bundle, transport=chat_transport(cfg, client))
    pairs = [CandidatePair(0, 1, "knn"), CandidatePair(1, 0, "density"), CandidatePair(2, 5, "knn")]
    om.annotate(pairs)
    om.annotate(pairs)
    cache_ok = len(calls) == 2 and om.stats.cache_hits == 3

    rng = np.random.default_rng(1010)
    labels = rng.integers(0, 12, size=500)
    big = DatasetBundle([Utterance(i, f"u{i}", f"c{c}") for i, c in enumerate(labels)])
    a = rng.integers(0, 500, size=10_000)
    b = (a + rng.integers(1, 500, size=10_000)) % 500
    sim = OracleManager(OracleConfig(noise_rate=0.0, seed=5), big)
    got = [lab.r for lab in sim.annotate([CandidatePair(int(i), int(j), "knn") for i, j in zip(a, b)])]
    truth = (labels[a] == labels[b]).astype(int).tolist()
    sim_ok = got == truth

    verdict(
        10,
        "oracle manager contracts",
        not parse_fail and cache_ok and sim_ok,
        f"parse fixtures={len(PARSE_CASES) - len(parse_fail)}/{len(PARSE_CASES)}; "
        f"dispatches={len(calls)} for 3 pairs x2 (cache hits {om.stats.cache_hits}); "
        f"simulated==truth on {len(got)} pairs: {sim_ok}",
    )


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
