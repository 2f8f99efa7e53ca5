"""Headline acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from spokenalign import align as A
from spokenalign import cli, frontend, retrieval, synth
from spokenalign import wordcnn as W

from oracles import (alignment_gradcheck, cnn_gradcheck, conv_gradcheck, fc_gradcheck, hand_cost, lrn_gradcheck,
                     maxpool_gradcheck, naive_similarity, random_instance, relu_gradcheck, screened_cnn_instances,
                     screened_instances, softmax_gradcheck)
from test_cli import run_pipeline, tree_bytes

ROOT = Path(__file__).resolve().parents[1]
SYNTH_CONFIG = ROOT / "configs" / "synthetic.toml"
N_SEEDS = 20


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_gradient_integrity(capsys):
    start = time.perf_counter()
    worst = {}
    for name, check in [("conv", conv_gradcheck), ("relu", relu_gradcheck), ("lrn", lrn_gradcheck),
                        ("maxpool", maxpool_gradcheck), ("fc", fc_gradcheck), ("softmax", softmax_gradcheck)]:
        worst[name] = max(check(seed) for seed in range(N_SEEDS))
    worst["word-cnn"] = max(cnn_gradcheck(inst) for inst in screened_cnn_instances(N_SEEDS))
    worst["alignment"] = max(alignment_gradcheck(*inst) for inst in screened_instances(N_SEEDS))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(capsys, "gradient integrity", ok, f"worst rel err {detail} ({N_SEEDS} seeds each, {elapsed:.1f}s)")


def test_oracle_equivalence(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(50):
        B = int(rng.integers(1, 6))
        images, captions, params = random_instance(rng, B, 6, 5, 4)
        S = A.batch_similarity(images, captions, params)
        naive = np.array([[naive_similarity(i, c, params) for c in captions] for i in images])
        mismatches += not np.array_equal(S, naive)
    hinge_bad = 0
    for _ in range(50):
        B = int(rng.integers(1, 4))
        S = rng.normal(scale=1.5, size=(B, B))
        hinge_bad += A.margin_cost(S) != pytest.approx(hand_cost(S), abs=1e-12)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and hinge_bad == 0 and elapsed < 10
    verdict(capsys, "oracle equivalence", ok,
            f"{mismatches}/50 similarity batches differ bitwise, {hinge_bad}/50 hinge sums differ ({elapsed:.1f}s)")


@pytest.fixture(scope="module")
def synthetic_run():
    doc = cli.load_config_file(SYNTH_CONFIG)
    _, train, test = cli.synth_splits(cli.resolve("synth", doc, {}))
    fit_cfg = A.FitConfig(**cli.resolve("train", doc, {}))
    start = time.perf_counter()
    result = A.fit(train.images, train.captions, fit_cfg)
    return test, result, fit_cfg, time.perf_counter() - start


def test_synthetic_retrieval(capsys, synthetic_run):
    test, result, cfg, fit_seconds = synthetic_run
    search, annotation = retrieval.evaluate(test.images, test.captions, result.params)
    r_search, r_annot = retrieval.recall_at_k(search, 10), retrieval.recall_at_k(annotation, 10)
    ok = r_search >= 0.8 and r_annot >= 0.8 and cfg.epochs <= 300 and fit_seconds < 300
    verdict(capsys, "synthetic retrieval", ok,
            f"search R@10 {r_search:.3f}, annotation R@10 {r_annot:.3f} (need 0.8, random 0.1); "
            f"lr {cfg.learning_rate:g}, {cfg.epochs} epochs, fit {fit_seconds:.0f}s")


def test_alignment_accuracy(capsys, synthetic_run):
    test, result, _, _ = synthetic_run
    start = time.perf_counter()
    oracle = synth.oracle_alignment(test.images, test.captions, test.truth)
    by_id = {img.image_id: img for img in test.images}
    hits = total = 0
    for cap in test.captions:
        aligns = A.infer_alignment(by_id[cap.image_id], cap, result.params)
        for a, allowed in zip(aligns, oracle[cap.caption_id]):
            hits += a.region_index in allowed
            total += 1
    elapsed = time.perf_counter() - start
    acc = hits / total
    verdict(capsys, "alignment accuracy", acc >= 0.9 and elapsed < 30,
            f"{hits}/{total} words = {acc:.3f} on planted regions (need 0.9, {elapsed:.1f}s)")


def test_word_cnn_overfit(capsys):
    specs, labels = synth.tone_dataset(synth.ToneConfig(n_classes=50, per_class=5))
    start = time.perf_counter()
    res = W.pretrain(specs, labels, 50, W.PretrainConfig(epochs=200, target_train_top1=0.99))
    elapsed = time.perf_counter() - start
    top1 = res.history[-1].train_top1
    ordered = all(h.train_top5 >= h.train_top1 for h in res.history)
    ok = top1 >= 0.99 and ordered and len(res.history) <= 200 and elapsed < 600
    verdict(capsys, "word-CNN overfit", ok,
            f"train top-1 {top1:.3f} after {len(res.history)} epochs, top-5 >= top-1 every epoch: {ordered} "
            f"({elapsed:.0f}s)")


def test_frontend_exactness(capsys):
    start = time.perf_counter()
    t = np.arange(16000) / 16000
    wave = frontend.Waveform(0.5 * np.sin(2 * np.pi * 1000 * t))
    raw = frontend.log_mel_spectrogram(wave)
    fitted = frontend.word_spectrogram(wave)
    norm = frontend.normalize_spectrogram(raw)
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    centres = 700 * (10 ** (np.linspace(mel(20), mel(8000), 42)[1:-1] / 2595) - 1)
    band = int(np.argmin(np.abs(centres - 1000)))
    peaks = raw.argmax(axis=0)
    elapsed = time.perf_counter() - start
    ok = (raw.shape == (40, 98) and fitted.shape == (40, 100) and abs(norm.mean()) < 1e-10
          and abs(norm.var() - 1) < 1e-8 and np.all(peaks == band) and elapsed < 5)
    verdict(capsys, "frontend exactness", ok,
            f"frames {raw.shape[1]} -> {fitted.shape[1]}, mean {norm.mean():.1e}, var-1 {norm.var() - 1:.1e}, "
            f"1 kHz peak band {sorted(set(peaks.tolist()))} expected {band} ({elapsed:.2f}s)")


def test_pipeline_determinism(capsys, tmp_path):
    run_pipeline(tmp_path / "a")
    run_pipeline(tmp_path / "b")
    first, second = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    verdict(capsys, "determinism", not differing,
            f"{len(first)} artifacts from synth, featurize, pretrain, embed, train, eval; "
            f"{len(differing)} differ between reruns")


def test_metric_sanity(capsys):
    pool, n, k = 1000, 1000, 10
    p = k / pool
    sigma = math.sqrt(p * (1 - p) / n)
    got = retrieval.random_score_recall(pool, n, k, seed=0)
    verdict(capsys, "metric sanity", abs(got - p) <= 3 * sigma,
            f"random R@10 over {pool} candidates = {got:.4f}, expected {p} +/- {3 * sigma:.4f}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
