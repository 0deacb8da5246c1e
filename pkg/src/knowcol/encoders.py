"""Trainable parameter containers and forward encodings.

The frozen backbones live outside this artifact; what trains here are
linear projection layers applied to their raw outputs, an optional
fusion MLP, and the entity/relation embedding tables. Projection and
fusion outputs are L2-normalized so cosine similarity reduces to a dot
product downstream. Table rows are deliberately NOT normalized: the
translation scoring needs an unconstrained space, and cosine handles
their scale inside the losses.

All forward functions are pure given a parameter snapshot; tables are
single-writer (the trainer) and multi-reader between steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ProjectionLayer",
    "EmbeddingTable",
    "FusionConfig",
    "ModelParams",
    "project",
    "fuse",
    "encode_entity",
    "lookup",
    "init_tables",
    "init_projection",
    "init_fusion",
]

KGE_METHODS = ("transe_cos", "transe_euclid", "transh", "distmult")
FUSION_KINDS = ("addition", "concat_mlp")


@dataclass
class ProjectionLayer:
    """Trainable linear map from a raw backbone space to the latent space."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray    # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class EmbeddingTable:
    """Dense trainable vectors per entity and relation.

    ``relation_normals`` carries the per-relation hyperplane normals and is
    present only for the hyperplane-projected translation method; its rows
    are kept at unit norm by the optimizer after every step.
    """

    entity_vectors: np.ndarray              # (n_entities, d_e)
    relation_vectors: np.ndarray            # (n_relations, d_e)
    relation_normals: np.ndarray | None = None  # (n_relations, d_e)

    @property
    def n_entities(self) -> int:
        return self.entity_vectors.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.entity_vectors.shape[1]


@dataclass
class FusionConfig:
    """How the projected input image and text query are combined.

    ``addition`` carries no parameters. ``concat_mlp`` concatenates to
    2*d_e and applies one or two (linear, ReLU) layers back down to d_e.
    """

    kind: str = "addition"
    layers: int = 1
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)


@dataclass
class ModelParams:
    """Everything the trainer updates, bundled."""

    lp_img: ProjectionLayer
    lp_txt: ProjectionLayer
    tables: EmbeddingTable
    fusion: FusionConfig


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError(f"{what} is zero before normalization")
    return v / n


def project(raw, layer: ProjectionLayer) -> np.ndarray:
    """Apply the linear layer and L2-normalize: ``(W @ raw + b) / ||.||``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (layer.in_dim,):
        raise ValueError(f"raw vector has shape {raw.shape}, "
                         f"layer expects ({layer.in_dim},)")
    out = layer.weight @ raw + layer.bias
    return _unit(out, "projection output")


def fuse(z_img, z_txt, cfg: FusionConfig) -> np.ndarray:
    """Combine two unit latent vectors into one unit query embedding."""
    z_img = np.asarray(z_img, dtype=np.float64)
    z_txt = np.asarray(z_txt, dtype=np.float64)
    if z_img.shape != z_txt.shape:
        raise ValueError("fusion inputs must share a dimension")
    if cfg.kind == "addition":
        return _unit(z_img + z_txt, "fused embedding (opposite inputs?)")
    if cfg.kind != "concat_mlp":
        raise ValueError(f"unknown fusion kind {cfg.kind!r}")
    h = np.concatenate([z_img, z_txt])
    for w, b in zip(cfg.weights, cfg.biases):
        h = np.maximum(w @ h + b, 0.0)
    return _unit(h, "fused embedding")


def encode_entity(entry, lp_img: ProjectionLayer, lp_txt: ProjectionLayer,
                  stores) -> tuple[np.ndarray, np.ndarray]:
    """Encode an entity's description and lead images into the latent space.

    Returns ``(z_text, z_image)``. The image encoding is the normalized
    mean of the projected lead images; with no lead images it falls back
    to the text encoding exactly (same array).
    """
    z_text = project(stores.text.vector(entry.description_embedding_id), lp_txt)
    if not entry.lead_image_embedding_ids:
        return z_text, z_text
    projected = [project(stores.image.vector(i), lp_img)
                 for i in entry.lead_image_embedding_ids]
    mean = np.mean(projected, axis=0)
    return z_text, _unit(mean, f"lead-image mean of {entry.qid}")


def lookup(table: EmbeddingTable, idx: int, kind: str = "entity") -> np.ndarray:
    """Read the current trainable row for an entity or relation id."""
    if kind == "entity":
        rows = table.entity_vectors
    elif kind == "relation":
        rows = table.relation_vectors
    elif kind == "normal":
        rows = table.relation_normals
        if rows is None:
            raise ValueError("table carries no relation normals")
    else:
        raise ValueError(f"unknown lookup kind {kind!r}")
    if not (0 <= idx < rows.shape[0]):
        raise ValueError(f"unknown {kind} id {idx}")
    return rows[idx]


def init_tables(n_entities: int, n_relations: int, d_e: int,
                kge_method: str, seed) -> EmbeddingTable:
    """Uniform init in [-1/sqrt(d_e), 1/sqrt(d_e)]; unit hyperplane normals."""
    if d_e < 1:
        raise ValueError("d_e must be >= 1")
    if kge_method not in KGE_METHODS:
        raise ValueError(f"unknown kge_method {kge_method!r}")
    rng = np.random.default_rng(np.random.SeedSequence(_seed_key(seed) + [11]))
    bound = 1.0 / np.sqrt(d_e)
    entity = rng.uniform(-bound, bound, size=(n_entities, d_e))
    relation = rng.uniform(-bound, bound, size=(n_relations, d_e))
    normals = None
    if kge_method == "transh":
        normals = rng.uniform(-bound, bound, size=(n_relations, d_e))
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        normals = normals / norms
    return EmbeddingTable(entity, relation, normals)


def init_projection(in_dim: int, out_dim: int, seed) -> ProjectionLayer:
    """Uniform weight init in +/- 1/sqrt(in_dim); zero bias."""
    rng = np.random.default_rng(np.random.SeedSequence(_seed_key(seed) + [23]))
    bound = 1.0 / np.sqrt(in_dim)
    return ProjectionLayer(
        weight=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
        bias=np.zeros(out_dim),
    )


def init_fusion(kind: str, d_e: int, layers: int, seed) -> FusionConfig:
    """Parameter-free addition, or a seeded 1-2 layer concat MLP."""
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}")
    if kind == "addition":
        return FusionConfig(kind="addition", layers=0)
    if layers not in (1, 2):
        raise ValueError("concat_mlp supports 1 or 2 layers")
    rng = np.random.default_rng(np.random.SeedSequence(_seed_key(seed) + [37]))
    dims = [(d_e, 2 * d_e)] + ([(d_e, d_e)] if layers == 2 else [])
    weights, biases = [], []
    for out_d, in_d in dims:
        bound = 1.0 / np.sqrt(in_d)
        weights.append(rng.uniform(-bound, bound, size=(out_d, in_d)))
        biases.append(np.zeros(out_d))
    return FusionConfig(kind="concat_mlp", layers=layers,
                        weights=weights, biases=biases)


def _seed_key(seed) -> list[int]:
    """Normalize an int or int-tuple seed into a SeedSequence entropy list."""
    key = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    if any(s < 0 for s in key):
        raise ValueError("seed must be non-negative")
    return key
