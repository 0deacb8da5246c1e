"""Candidate indexing, top-k retrieval, and split-accuracy evaluation.

Retrieval never touches the trained node embeddings: each candidate row
is the plain average of the entity's text and image encodings, so unseen
entities get valid rows straight from their catalog records. Scoring is
exhaustive cosine similarity over the whole catalog (exactness over
speed at this scale), with exact ties broken by ascending QID.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoders import ProjectionLayer, encode_entity

__all__ = [
    "CandidateIndex",
    "EvalReport",
    "build_candidate_index",
    "retrieve_topk",
    "evaluate",
    "write_predictions",
]


@dataclass(frozen=True)
class CandidateIndex:
    """Catalog QIDs in ascending order plus their candidate vectors.

    Row j is ``(z_text_j + z_image_j) / 2``, unnormalized; retrieval
    normalizes when scoring, which leaves the ranking unchanged.
    """

    qids: tuple[str, ...]
    vectors: np.ndarray  # (n, d_e)


@dataclass(frozen=True)
class EvalReport:
    """Top-1 accuracy per split and their harmonic mean."""

    acc_seen: float
    acc_unseen: float
    harmonic_mean: float
    n_seen: int
    n_unseen: int
    correct_seen: int
    correct_unseen: int

    def to_dict(self) -> dict:
        return {
            "acc_seen": self.acc_seen,
            "acc_unseen": self.acc_unseen,
            "harmonic_mean": self.harmonic_mean,
            "n_seen": self.n_seen,
            "n_unseen": self.n_unseen,
            "correct_seen": self.correct_seen,
            "correct_unseen": self.correct_unseen,
        }

    def table(self) -> str:
        rows = [
            ("split", "examples", "correct", "top-1 acc"),
            ("seen", str(self.n_seen), str(self.correct_seen), f"{self.acc_seen:.4f}"),
            ("unseen", str(self.n_unseen), str(self.correct_unseen), f"{self.acc_unseen:.4f}"),
            ("harmonic mean", "", "", f"{self.harmonic_mean:.4f}"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows)


def build_candidate_index(catalog, lp_img: ProjectionLayer,
                          lp_txt: ProjectionLayer, stores) -> CandidateIndex:
    """Encode every catalog entity into its retrieval row.

    Entities without lead images collapse to their text encoding (the
    average of two identical vectors).
    """
    ordered = sorted(catalog, key=lambda e: e.qid)
    qids = tuple(e.qid for e in ordered)
    rows = np.empty((len(ordered), lp_txt.out_dim))
    for j, entry in enumerate(ordered):
        z_text, z_img = encode_entity(entry, lp_img, lp_txt, stores)
        rows[j] = 0.5 * (z_text + z_img)
        if not np.linalg.norm(rows[j]) > 0.0:
            raise ValueError(f"degenerate candidate row for {entry.qid}")
    return CandidateIndex(qids=qids, vectors=rows)


def retrieve_topk(z_input, index: CandidateIndex, k: int) -> list[tuple[str, float]]:
    """Rank candidates by cosine similarity to the query embedding.

    Returns up to ``k`` (qid, score) pairs, best first; exact score ties
    rank the lexicographically smaller QID first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    z = np.asarray(z_input, dtype=np.float64)
    zn = np.linalg.norm(z)
    if not zn > 0.0:
        raise ValueError("zero-norm query embedding")
    if z.shape != (index.vectors.shape[1],):
        raise ValueError(f"query dim {z.shape} does not match index "
                         f"dim ({index.vectors.shape[1]},)")
    norms = np.linalg.norm(index.vectors, axis=1)
    scores = (index.vectors @ (z / zn)) / norms
    order = sorted(range(len(index.qids)),
                   key=lambda j: (-scores[j], index.qids[j]))
    return [(index.qids[j], float(scores[j])) for j in order[:k]]


def evaluate(predictions, gold, splits) -> EvalReport:
    """Top-1 accuracy per split plus the harmonic mean.

    ``splits`` tags each gold label "seen" or "unseen"; both splits must
    be represented or the metric is undefined.
    """
    if not (len(predictions) == len(gold) == len(splits)):
        raise ValueError("predictions, gold, and splits must be aligned")
    counts = {"seen": [0, 0], "unseen": [0, 0]}  # [correct, total]
    for pred, g, split in zip(predictions, gold, splits):
        if split not in counts:
            raise ValueError(f"unknown split {split!r}")
        counts[split][1] += 1
        if pred == g:
            counts[split][0] += 1
    if counts["seen"][1] == 0 or counts["unseen"][1] == 0:
        raise ValueError("both seen and unseen examples are required "
                         "(split accuracy undefined)")
    acc_seen = counts["seen"][0] / counts["seen"][1]
    acc_unseen = counts["unseen"][0] / counts["unseen"][1]
    denom = acc_seen + acc_unseen
    hm = 0.0 if denom == 0.0 else 2.0 * acc_seen * acc_unseen / denom
    return EvalReport(acc_seen=acc_seen, acc_unseen=acc_unseen, harmonic_mean=hm,
                      n_seen=counts["seen"][1], n_unseen=counts["unseen"][1],
                      correct_seen=counts["seen"][0],
                      correct_unseen=counts["unseen"][0])


def write_predictions(topk_per_query, path) -> None:
    """Dump ranked predictions as JSONL, one object per query."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for i, topk in enumerate(topk_per_query):
            fh.write(json.dumps({
                "query_index": i,
                "topk": [{"qid": q, "score": s} for q, s in topk],
            }) + "\n")
