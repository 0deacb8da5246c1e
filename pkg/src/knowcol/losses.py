"""Loss kernels and triple score functions, with analytic gradients.

Three objectives drive training:

* alignment: symmetric contrastive loss between fused query embeddings
  and the node (entity) embeddings of their gold labels;
* proxy: symmetric contrastive loss pulling node embeddings toward the
  entities' text and lead-image encodings (node embeddings act as the
  bridge between the graph space and the perceptual spaces);
* knowledge-embedding (KE): a per-triple softmax over corrupted
  negatives (or a margin hinge for the Euclidean translation variant).

Similarity is cosine throughout. The KE softmax denominator contains the
negatives only, exactly as the training objective is defined, so its
value can be negative; ``include_positive_in_denominator`` switches to
the more common form that also adds the positive term (and is then
non-negative). Everything is built on the minimal reverse-mode tape in
:mod:`knowcol.autograd`, so every kernel has exact analytic gradients
with respect to every input vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .encoders import KGE_METHODS

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "contrastive_loss",
    "symmetric_contrastive_loss",
    "alignment_loss",
    "proxy_loss",
    "score_triple",
    "ke_loss_softmax",
    "ke_loss_margin",
    "total_loss",
]

SOFTMAX_KGE_METHODS = ("transe_cos", "transh", "distmult")
KE_REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossConfig:
    """Knobs shared by the loss kernels."""

    tau: float = 0.07
    beta1: float = 1.0
    beta2: float = 1.0
    kge_method: str = "transe_cos"
    margin: float = 1.0
    ke_batch_reduction: str = "mean"
    include_positive_in_denominator: bool = False

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be >= 0")
        if self.kge_method not in KGE_METHODS:
            raise ValueError(f"unknown kge_method {self.kge_method!r}")
        if self.ke_batch_reduction not in KE_REDUCTIONS:
            raise ValueError(f"unknown ke_batch_reduction {self.ke_batch_reduction!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; ``total = alignment + beta1*proxy + beta2*ke``."""

    alignment: float
    proxy: float
    ke: float
    total: float


# ---------------------------------------------------------------------------
# Tape-level cores (shared by the public kernels and the trainer)
# ---------------------------------------------------------------------------

def cosine_matrix(a, b) -> Var:
    """Pairwise cosine similarities between row sets (N, d) x (M, d)."""
    return ag.matmul_nt(ag.normalize_rows(a), ag.normalize_rows(b))


def _direction_loss(s_scaled: Var) -> Var:
    # -(1/N) sum_i log softmax over row i at the diagonal
    return ag.mean_all(ag.sub(ag.logsumexp_rows(s_scaled), ag.take_diag(s_scaled)))


def contrastive_core(a, b, tau: float) -> Var:
    """One-directional contrastive loss over matched row sets."""
    return _direction_loss(ag.scale(cosine_matrix(a, b), 1.0 / tau))


def symmetric_core(a, b, tau: float) -> Var:
    """Mean of the two directions, computed from a single sim matrix.

    The sim matrix goes through a fixed-order contraction and a contiguous
    transpose, which makes ``symmetric_core(a, b)`` and
    ``symmetric_core(b, a)`` bitwise equal.
    """
    s = ag.scale(cosine_matrix(a, b), 1.0 / tau)
    return ag.scale(ag.add(_direction_loss(s), _direction_loss(ag.transpose_c(s))), 0.5)


def proxy_core(node, text, image, tau: float) -> Var:
    return ag.scale(ag.add(symmetric_core(node, text, tau),
                           symmetric_core(node, image, tau)), 0.5)


def score_rows_core(method: str, h, r, t, w_r=None) -> Var:
    """Row-wise triple scores for (P, d) head/relation/tail stacks.

    ``transe_cos``: cos(h + r, t).  ``transe_euclid``: ||h + r - t||
    (a distance; smaller is better).  ``transh``: cosine after projecting
    h and t onto the relation hyperplane.  ``distmult``: sum_k h_k r_k t_k.
    The hyperplane normal is renormalized inside the graph so gradients
    stay exact even if rows drift off unit norm.
    """
    if method == "transe_cos":
        return ag.rowsum(ag.mul(ag.normalize_rows(ag.add(h, r)), ag.normalize_rows(t)))
    if method == "transe_euclid":
        return ag.row_norm(ag.sub(ag.add(h, r), t))
    if method == "distmult":
        return ag.rowsum(ag.mul(ag.mul(h, r), t))
    if method == "transh":
        if w_r is None:
            raise ValueError("transh requires hyperplane normals")
        wn = ag.normalize_rows(w_r)
        h_proj = ag.sub(h, ag.mul_colvec(wn, ag.rowsum(ag.mul(h, wn))))
        t_proj = ag.sub(t, ag.mul_colvec(wn, ag.rowsum(ag.mul(t, wn))))
        return ag.rowsum(ag.mul(ag.normalize_rows(ag.add(h_proj, r)),
                                ag.normalize_rows(t_proj)))
    raise ValueError(f"unknown kge_method {method!r}")


def ke_softmax_core(s_pos: Var, s_neg: Var, tau: float, weights,
                    include_positive: bool) -> Var:
    """Weighted sum over positives of ``lse(negatives/tau) - pos/tau``.

    ``s_neg`` is (P, K); padded slots must already be -inf so they drop
    out of the log-sum-exp. ``weights`` folds the per-entity triple-count
    normalization, the per-triple 1/|negatives| factor, and the batch
    reduction coefficient.
    """
    p = s_pos.shape[0]
    scaled_pos = ag.scale(s_pos, 1.0 / tau)
    scaled_neg = ag.scale(s_neg, 1.0 / tau)
    if include_positive:
        logits = ag.concat_cols(ag.reshape(scaled_pos, (p, 1)), scaled_neg)
    else:
        logits = scaled_neg
    per_positive = ag.sub(ag.logsumexp_rows(logits), scaled_pos)
    return ag.weighted_sum(per_positive, weights)


def ke_margin_core(d_pos: Var, d_neg: Var, margin: float, weights) -> Var:
    """Weighted sum of hinge terms ``max(0, margin + d_pos - d_neg)``.

    ``d_neg`` is (P, K) of distances; padded slots must be +inf so their
    hinges vanish. ``weights`` carries the same normalization as the
    softmax form (the 1/|negatives| factor here averages the hinge sum).
    """
    k = d_neg.shape[1]
    hinge = ag.relu(ag.add_const(ag.sub(ag.expand_col(d_pos, k), d_neg), margin))
    return ag.weighted_sum(ag.rowsum(hinge), weights)


# ---------------------------------------------------------------------------
# Public kernels
# ---------------------------------------------------------------------------

def _as_rows(vectors, name: str) -> np.ndarray:
    rows = np.asarray(vectors, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty list of equal-length vectors")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"{name} contains a zero-norm vector (cosine undefined)")
    return rows


def contrastive_loss(a, b, tau: float) -> float:
    """Softmax contrastive loss over matched pairs (a_i, b_i); cosine sim."""
    ra, rb = _as_rows(a, "A"), _as_rows(b, "B")
    if ra.shape != rb.shape:
        raise ValueError("A and B must have matching shapes")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return float(contrastive_core(ag.leaf(ra), ag.leaf(rb), tau).value)


def symmetric_contrastive_loss(a, b, tau: float) -> float:
    """Mean of both contrastive directions; exactly symmetric in (a, b)."""
    ra, rb = _as_rows(a, "A"), _as_rows(b, "B")
    if ra.shape != rb.shape:
        raise ValueError("A and B must have matching shapes")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return float(symmetric_core(ag.leaf(ra), ag.leaf(rb), tau).value)


def alignment_loss(z_inputs, node_embs, tau: float) -> float:
    """Symmetric contrastive loss between fused queries and node embeddings."""
    return symmetric_contrastive_loss(z_inputs, node_embs, tau)


def proxy_loss(node_embs, entity_text_embs, entity_img_embs, tau: float) -> float:
    """Half symmetric loss to the text encodings plus half to the image ones."""
    rn = _as_rows(node_embs, "node_embs")
    rt = _as_rows(entity_text_embs, "entity_text_embs")
    ri = _as_rows(entity_img_embs, "entity_img_embs")
    if not (rn.shape == rt.shape == ri.shape):
        raise ValueError("proxy_loss requires three index-aligned lists")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return float(proxy_core(ag.leaf(rn), ag.leaf(rt), ag.leaf(ri), tau).value)


def score_triple(method: str, h_emb, r_emb, t_emb, w_r=None) -> float:
    """Score one triple; see :func:`score_rows_core` for the four forms."""
    h = np.asarray(h_emb, dtype=np.float64)
    r = np.asarray(r_emb, dtype=np.float64)
    t = np.asarray(t_emb, dtype=np.float64)
    if not (h.shape == r.shape == t.shape) or h.ndim != 1:
        raise ValueError("h, r, t must be vectors of equal dimension")
    if method not in KGE_METHODS:
        raise ValueError(f"unknown kge_method {method!r}")
    wr_rows = None
    if method == "transh":
        if w_r is None:
            raise ValueError("transh requires w_r")
        w = np.asarray(w_r, dtype=np.float64)
        if w.shape != h.shape:
            raise ValueError("w_r dimension mismatch")
        if abs(np.linalg.norm(w) - 1.0) > 1e-6:
            raise ValueError("w_r must be unit-norm")
        wr_rows = ag.leaf(w[None, :])
    score = score_rows_core(method, ag.leaf(h[None, :]), ag.leaf(r[None, :]),
                            ag.leaf(t[None, :]), wr_rows)
    return float(score.value[0])


def _ke_bundles(batch_entities, triples_per_entity, negatives_per_triple, table):
    """Flatten per-entity bundles into padded (P, K) index stacks."""
    if len(batch_entities) != len(triples_per_entity) or \
            len(batch_entities) != len(negatives_per_triple):
        raise ValueError("batch lists must be index-aligned")
    pos, owners, negs = [], [], []
    for slot, (triples, neg_lists) in enumerate(
            zip(triples_per_entity, negatives_per_triple)):
        if len(triples) != len(neg_lists):
            raise ValueError(f"entity slot {slot}: triples and negatives misaligned")
        for t, nl in zip(triples, neg_lists):
            if len(nl) == 0:
                raise ValueError(f"triple {t} has an empty negative list")
            pos.append(t)
            owners.append(slot)
            negs.append(nl)
    return pos, owners, negs


def _ke_weights(owners, triples_per_entity, neg_counts, n_batch, reduction):
    coef = 1.0 if reduction == "sum" else 1.0 / n_batch
    counts = [len(t) for t in triples_per_entity]
    return np.array([coef / counts[o] / k for o, k in zip(owners, neg_counts)])


def ke_loss_softmax(batch_entities, triples_per_entity, negatives_per_triple,
                    table, cfg: LossConfig) -> float:
    """Per-entity mean over triples of the softmax term against negatives.

    The per-triple term is ``(1/|negatives|) * -log(exp(s_pos/tau) /
    sum_neg exp(s_neg/tau))``; entities with no triples contribute 0; the
    batch is reduced by ``cfg.ke_batch_reduction``.
    """
    cfg.validate()
    if cfg.kge_method not in SOFTMAX_KGE_METHODS:
        raise ValueError(f"{cfg.kge_method!r} uses the margin form, not softmax")
    pos, owners, negs = _ke_bundles(batch_entities, triples_per_entity,
                                    negatives_per_triple, table)
    if not pos:
        return 0.0
    s_pos, s_neg = _score_stacks(cfg.kge_method, pos, negs, table, pad=-np.inf)
    weights = _ke_weights(owners, triples_per_entity, [len(n) for n in negs],
                          len(batch_entities), cfg.ke_batch_reduction)
    return float(ke_softmax_core(s_pos, s_neg, cfg.tau, weights,
                                 cfg.include_positive_in_denominator).value)


def ke_loss_margin(batch_entities, triples_per_entity, negatives_per_triple,
                   table, margin: float, reduction: str = "mean") -> float:
    """Hinge form for the Euclidean translation method.

    Per triple: mean over negatives of ``max(0, margin + d_pos - d_neg)``
    where d is the translation distance; per entity: mean over triples.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if reduction not in KE_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    pos, owners, negs = _ke_bundles(batch_entities, triples_per_entity,
                                    negatives_per_triple, table)
    if not pos:
        return 0.0
    d_pos, d_neg = _score_stacks("transe_euclid", pos, negs, table, pad=np.inf)
    weights = _ke_weights(owners, triples_per_entity, [len(n) for n in negs],
                          len(batch_entities), reduction)
    return float(ke_margin_core(d_pos, d_neg, margin, weights).value)


def _score_stacks(method, positives, negatives, table, pad):
    """Score flat positives and a padded (P, K) matrix of negatives."""
    def rows(triples):
        h = ag.leaf(table.entity_vectors[[t.head for t in triples]])
        r = ag.leaf(table.relation_vectors[[t.relation for t in triples]])
        t_ = ag.leaf(table.entity_vectors[[t.tail for t in triples]])
        w = None
        if method == "transh":
            w = ag.leaf(table.relation_normals[[t.relation for t in triples]])
        return score_rows_core(method, h, r, t_, w)

    s_pos = rows(positives)
    k_max = max(len(n) for n in negatives)
    flat = [n[i] if i < len(n) else n[0] for n in negatives for i in range(k_max)]
    keep = np.array([[i < len(n) for i in range(k_max)] for n in negatives])
    s_flat = rows(flat)
    s_neg = ag.mask_fill(ag.reshape(s_flat, (len(negatives), k_max)), keep, pad)
    return s_pos, s_neg


def total_loss(l_a: float, l_p: float, l_ke: float,
               beta1: float, beta2: float) -> float:
    """Weighted sum ``l_a + beta1*l_p + beta2*l_ke``."""
    return l_a + beta1 * l_p + beta2 * l_ke
