"""Bidirectional pair ranking and the reciprocal-rank "MAP" score.

The score reported as MAP is, in standard terms, a mean reciprocal rank:
every ground-truth typeA/typeB pair contributes ``1/R^B + 1/R^A`` where
``R^B`` is the rank of the true typeB item among all typeB candidates
ordered by distance to the pair's typeA item, and ``R^A`` the reverse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .exceptions import UnknownItemError, ValidationError

_CHUNK = 256


@dataclass
class EvalPairSet:
    pairs: List[Tuple[str, str]]
    embeddings: Dict[str, np.ndarray]

    def validate(self) -> None:
        if not self.pairs:
            raise ValidationError("pair set is empty")
        seen = set()
        dims = set()
        for a, b in self.pairs:
            for item in (a, b):
                if item in seen:
                    raise ValidationError(f"item {item!r} appears in more than one pair")
                seen.add(item)
                if item not in self.embeddings:
                    raise ValidationError(f"item {item!r} has no embedding")
                dims.add(np.asarray(self.embeddings[item]).shape)
        if len(dims) != 1:
            raise ValidationError(f"embeddings disagree on shape: {sorted(dims)}")


@dataclass(frozen=True)
class PairRank:
    item_a: str
    item_b: str
    rank_a: int
    rank_b: int


@dataclass
class RankResult:
    """Per-pair ranks, ordered by ``item_a``."""

    pairs: List[PairRank]

    def __len__(self):
        return len(self.pairs)


def pairwise_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix in float64, computed from explicit differences."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    out = np.empty((len(A), len(B)))
    for s in range(0, len(A), _CHUNK):
        diff = A[s : s + _CHUNK, None, :] - B[None, :, :]
        out[s : s + _CHUNK] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def _ranks_of_diagonal(dist: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Rank of ``ids[i]`` in row ``i`` of ``dist`` (ascending, ties by id)."""
    ids = np.asarray(ids)
    true = np.diag(dist)[:, None]
    closer = dist < true
    tied_before = (dist == true) & (ids[None, :] < ids[:, None])
    return 1 + closer.sum(axis=1) + tied_before.sum(axis=1)


def rank_pairs(pairset: EvalPairSet) -> RankResult:
    pairset.validate()
    pairs = sorted(pairset.pairs)
    a_ids = [a for a, _ in pairs]
    b_ids = [b for _, b in pairs]
    A = np.stack([np.asarray(pairset.embeddings[a], dtype=np.float64).ravel() for a in a_ids])
    B = np.stack([np.asarray(pairset.embeddings[b], dtype=np.float64).ravel() for b in b_ids])
    dist = pairwise_distances(A, B)
    rank_b = _ranks_of_diagonal(dist, b_ids)
    rank_a = _ranks_of_diagonal(dist.T, a_ids)
    return RankResult([PairRank(a, b, int(ra), int(rb)) for a, b, ra, rb in zip(a_ids, b_ids, rank_a, rank_b)])


def compute_map(ranks: RankResult, normalize: bool = True) -> float:
    """``sum_i (1/R_i^B + 1/R_i^A) / 2``, divided by the pair count when ``normalize``."""
    if not ranks.pairs:
        raise ValidationError("no ranked pairs")
    total = sum(1.0 / p.rank_b + 1.0 / p.rank_a for p in ranks.pairs) / 2.0
    return total / len(ranks.pairs) if normalize else total


def retrieve(query_id: str, candidates, embeddings: Dict[str, np.ndarray], k: int) -> List[Tuple[str, float]]:
    """Top-``k`` candidates by ascending euclidean distance to the query (ties by id)."""
    if query_id not in embeddings:
        raise UnknownItemError(query_id)
    cands = sorted(candidates)
    missing = [c for c in cands if c not in embeddings]
    if missing:
        raise UnknownItemError(missing[0])
    if not 1 <= k <= len(cands):
        raise ValidationError(f"k must lie in [1, {len(cands)}], got {k}")
    q = np.asarray(embeddings[query_id], dtype=np.float64).ravel()[None]
    C = np.stack([np.asarray(embeddings[c], dtype=np.float64).ravel() for c in cands])
    d = pairwise_distances(q, C)[0]
    order = sorted(range(len(cands)), key=lambda i: (d[i], cands[i]))[:k]
    return [(cands[i], float(d[i])) for i in order]


def results_dict(ranks: RankResult) -> dict:
    return {
        "map_normalized": compute_map(ranks, True),
        "map_paper_formula": compute_map(ranks, False),
        "n_pairs": len(ranks.pairs),
        "per_pair": [
            {"item_a": p.item_a, "item_b": p.item_b, "rank_a": p.rank_a, "rank_b": p.rank_b} for p in ranks.pairs
        ],
    }


def write_results(path, ranks: RankResult) -> Path:
    path = Path(path)
    path.write_text(json.dumps(results_dict(ranks), sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_embeddings(path, rows) -> Path:
    """``rows`` yields ``(item_id, category, vector)``; one JSON object per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for item_id, category, vec in rows:
            obj = {"item_id": item_id, "category": category, "vector": [float(v) for v in np.asarray(vec).ravel()]}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    return path


def read_embeddings(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Return ``(item_id -> vector, item_id -> category)``."""
    vectors, categories = {}, {}
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item = obj["item_id"]
                vectors[item] = np.asarray(obj["vector"], dtype=np.float64)
                categories[item] = obj["category"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{line_no}: malformed embedding line ({exc})") from exc
    return vectors, categories
