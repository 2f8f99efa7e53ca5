"""Image search and annotation by ranking, scored with recall@K."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .align import score_matrix
from .errors import EvaluationSetupError, InputError


@dataclass
class RankingResult:
    query_id: str
    ranked_ids: list[str]
    ranked_scores: list[float]
    correct_ranks: list[int]  # 1-based, ascending
    rank_of_correct: int = field(init=False)

    def __post_init__(self):
        self.rank_of_correct = min(self.correct_ranks)


def rank(query_id, candidate_ids, scores, true_ids):
    """Order candidates by descending score, ties by ascending id."""
    scores = [float(s) for s in scores]
    if len(scores) != len(candidate_ids):
        raise InputError(f"{len(candidate_ids)} candidates but {len(scores)} scores")
    if not candidate_ids:
        raise EvaluationSetupError(f"query {query_id}: empty candidate pool")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], candidate_ids[i]))
    ranked = [candidate_ids[i] for i in order]
    truth = set(true_ids)
    hits = [pos + 1 for pos, cid in enumerate(ranked) if cid in truth]
    if not hits:
        raise EvaluationSetupError(f"query {query_id}: no correct candidate in the pool")
    return RankingResult(query_id, ranked, [scores[i] for i in order], hits)


def image_search(caption, images, params, normalize=True):
    scores = score_matrix(images, [caption], params, normalize)[:, 0] if images else []
    return rank(caption.caption_id, [img.image_id for img in images], scores, [caption.image_id])


def image_annotation(image, captions, params, normalize=True):
    scores = score_matrix([image], captions, params, normalize)[0] if captions else []
    true = [c.caption_id for c in captions if c.image_id == image.image_id]
    return rank(image.image_id, [c.caption_id for c in captions], scores, true)


def evaluate(images, captions, params, normalize=True):
    """Both tasks over a test pool, scoring every pair once.

    Search queries are all captions against all images; annotation queries are
    all images against all captions.
    """
    S = score_matrix(images, captions, params, normalize)
    image_ids = [img.image_id for img in images]
    caption_ids = [c.caption_id for c in captions]
    search = [rank(c.caption_id, image_ids, S[:, j], [c.image_id]) for j, c in enumerate(captions)]
    annotation = []
    for i, img in enumerate(images):
        true = [c.caption_id for c in captions if c.image_id == img.image_id]
        annotation.append(rank(img.image_id, caption_ids, S[i], true))
    return search, annotation


def recall_at_k(results, k):
    if not results:
        raise InputError("recall@k of an empty result list")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    return sum(r.rank_of_correct <= k for r in results) / len(results)


def report(task, results, k):
    pool = len(results[0].ranked_ids) if results else 0
    return {
        "task": task,
        "pool_size": pool,
        "n_queries": len(results),
        "k": k,
        "recall": recall_at_k(results, k),
        "per_query": [{"query_id": r.query_id, "rank": r.rank_of_correct} for r in results],
    }


def write_report_json(path, reports):
    with open(path, "w") as fh:
        json.dump(reports, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, reports):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["task", "query_id", "rank"])
        for rep in reports:
            for q in rep["per_query"]:
                out.writerow([rep["task"], q["query_id"], q["rank"]])


def random_score_recall(pool_size, n_queries, k, seed=0):
    """Recall@k when every candidate gets an independent uniform random score."""
    rng = np.random.default_rng(seed)
    ids = [f"c{i:06d}" for i in range(pool_size)]
    results = []
    for q in range(n_queries):
        true = ids[int(rng.integers(pool_size))]
        results.append(rank(f"q{q}", ids, rng.random(pool_size), [true]))
    return recall_at_k(results, k)
