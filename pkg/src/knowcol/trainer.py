"""Training loop: batching, analytic backward pass, AdamW, checkpoint state.

The forward graph is shallow (table lookup -> linear -> normalize ->
cosine/softmax), so gradients come from the minimal reverse-mode tape in
:mod:`knowcol.autograd` rather than an external learning framework, and
:func:`grad_check` can verify every configuration against central finite
differences in double precision.

Determinism: single-threaded training is a pure function of the config
and the input files. All randomness derives from ``config.seed`` through
named SeedSequence streams; per-entity triple caps and negative draws are
reseeded per epoch from (seed, epoch, entity id). Embedding-table rows
untouched by a batch receive no update and no weight decay, and are
bitwise unchanged across a step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autograd as ag
from . import losses as L
from .dataio import StoreBundle, save_checkpoint
from .encoders import (
    FUSION_KINDS,
    KGE_METHODS,
    EmbeddingTable,
    FusionConfig,
    ModelParams,
    ProjectionLayer,
    init_fusion,
    init_projection,
    init_tables,
)
from .graphstore import KnowledgeGraph, entity_triples, sample_negatives

__all__ = [
    "ConfigError",
    "TrainConfig",
    "Batch",
    "OptimizerState",
    "Gradients",
    "TrainState",
    "EpochStats",
    "init_state",
    "build_batch",
    "forward_backward",
    "forward_value",
    "adamw_step",
    "lr_at_step",
    "grad_check",
    "train",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TABLE_PARAMS = ("phi", "psi", "w_r")


class ConfigError(ValueError):
    """Invalid configuration values (a usage error, not a data error)."""


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters; defaults follow the full-scale recipe
    (desk runs override size-dependent knobs downward)."""

    d_e: int = 768
    batch_size: int = 4096
    epochs: int = 15
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    tau: float = 0.07
    beta1: float = 1.0
    beta2: float = 1.0
    kge_method: str = "transe_cos"
    margin: float = 1.0
    triples_cap: int = 50
    negatives_per_entity: int = 25
    fusion: str = "addition"
    fusion_layers: int = 1
    seed: int = 0
    ke_batch_reduction: str = "mean"
    include_positive_in_denominator: bool = False
    use_alignment: bool = True
    decay_embeddings: bool = True

    def validate(self) -> None:
        for name in ("d_e", "batch_size", "epochs", "triples_cap",
                     "negatives_per_entity"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer")
        if self.d_e < 1:
            raise ConfigError("d_e must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.triples_cap < 1:
            raise ConfigError("triples_cap must be >= 1")
        if self.negatives_per_entity < 1:
            raise ConfigError("negatives_per_entity must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta1 and beta2 must be >= 0")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.kge_method not in KGE_METHODS:
            raise ConfigError(f"unknown kge_method {self.kge_method!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.fusion_layers not in (1, 2):
            raise ConfigError("fusion_layers must be 1 or 2")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.ke_batch_reduction not in L.KE_REDUCTIONS:
            raise ConfigError(
                f"unknown ke_batch_reduction {self.ke_batch_reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def loss_config(self) -> L.LossConfig:
        return L.LossConfig(
            tau=self.tau, beta1=self.beta1, beta2=self.beta2,
            kge_method=self.kge_method, margin=self.margin,
            ke_batch_reduction=self.ke_batch_reduction,
            include_positive_in_denominator=self.include_positive_in_denominator)


@dataclass
class Batch:
    """Index-aligned per-slot arrays assembled by :func:`build_batch`."""

    img_raws: np.ndarray        # (N, D_img)
    txt_raws: np.ndarray        # (N, D_txt)
    labels: np.ndarray          # (N,) master entity ids
    ent_text_raws: np.ndarray   # (N, D_txt)
    lead_raws: np.ndarray       # (M, D_img), slot-ordered
    lead_slot: np.ndarray       # (M,) owning slot per lead row
    has_leads: np.ndarray       # (N,) bool
    pos_h: np.ndarray           # (P,)
    pos_r: np.ndarray           # (P,)
    pos_t: np.ndarray           # (P,)
    pos_slot: np.ndarray        # (P,) owning slot per positive triple
    neg_h: np.ndarray           # (P, K)
    neg_t: np.ndarray           # (P, K)
    triple_counts: np.ndarray   # (N,) |sampled triples| per slot

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the global step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class Gradients:
    """Per-parameter gradient arrays plus touched-row sets for the tables."""

    arrays: dict[str, np.ndarray]
    touched: dict[str, np.ndarray]


@dataclass
class EpochStats:
    epoch: int
    alignment: float
    proxy: float
    ke: float
    total: float
    lr: float

    def to_json_line(self) -> str:
        return json.dumps({"epoch": self.epoch, "alignment": self.alignment,
                           "proxy": self.proxy, "ke": self.ke,
                           "total": self.total, "lr": self.lr})


def param_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    """Named views of every trainable array (the checkpoint tensor layout)."""
    out = {
        "lp_img.weight": params.lp_img.weight,
        "lp_img.bias": params.lp_img.bias,
        "lp_txt.weight": params.lp_txt.weight,
        "lp_txt.bias": params.lp_txt.bias,
        "phi": params.tables.entity_vectors,
        "psi": params.tables.relation_vectors,
    }
    if params.tables.relation_normals is not None:
        out["w_r"] = params.tables.relation_normals
    for i, (w, b) in enumerate(zip(params.fusion.weights, params.fusion.biases), 1):
        out[f"fusion.w{i}"] = w
        out[f"fusion.b{i}"] = b
    return out


@dataclass
class TrainState:
    """Everything a checkpoint round-trips: config, vocab, params, optimizer."""

    config: TrainConfig
    entity_qids: list[str]
    relation_pids: list[str]
    params: ModelParams
    opt: OptimizerState

    def __post_init__(self):
        self.entity_index = {q: i for i, q in enumerate(self.entity_qids)}

    @property
    def step(self) -> int:
        return self.opt.step

    def to_blob(self) -> dict:
        return {"config": self.config.to_dict(),
                "entity_ids": list(self.entity_qids),
                "relation_ids": list(self.relation_pids),
                "step": self.opt.step}

    def to_tensors(self) -> dict[str, np.ndarray]:
        tensors = dict(param_arrays(self.params))
        for name in tensors.copy():
            tensors[f"opt.m.{name}"] = self.opt.m[name]
            tensors[f"opt.v.{name}"] = self.opt.v[name]
        return tensors

    @classmethod
    def from_checkpoint(cls, blob: dict, tensors: dict[str, np.ndarray],
                        source: str = "checkpoint") -> "TrainState":
        for key in ("config", "entity_ids", "relation_ids", "step"):
            if key not in blob:
                raise ValueError(f"{source}: config blob missing {key!r}")
        config = TrainConfig.from_dict(blob["config"])
        entity_qids = list(blob["entity_ids"])
        relation_pids = list(blob["relation_ids"])
        shapes = _expected_shapes(config, len(entity_qids), len(relation_pids),
                                  _dims_from_tensors(tensors, source))
        arrays: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            for full in (name, f"opt.m.{name}", f"opt.v.{name}"):
                if full not in tensors:
                    raise ValueError(f"{source}: missing required tensor {full!r}")
                if tensors[full].shape != shape:
                    raise ValueError(
                        f"{source}: tensor {full!r} has shape "
                        f"{tensors[full].shape}, expected {shape} (dimension "
                        "mismatch vs config)")
                arrays[full] = tensors[full].astype(np.float64)
        params = _params_from_arrays(config, arrays)
        opt = OptimizerState(
            m={n: arrays[f"opt.m.{n}"] for n in shapes},
            v={n: arrays[f"opt.v.{n}"] for n in shapes},
            step=int(blob["step"]))
        return cls(config, entity_qids, relation_pids, params, opt)


def _dims_from_tensors(tensors: dict, source: str) -> tuple[int, int]:
    for name in ("lp_img.weight", "lp_txt.weight"):
        if name not in tensors:
            raise ValueError(f"{source}: missing required tensor {name!r}")
    return tensors["lp_img.weight"].shape[1], tensors["lp_txt.weight"].shape[1]


def _expected_shapes(config: TrainConfig, n_entities: int, n_relations: int,
                     raw_dims: tuple[int, int]) -> dict[str, tuple]:
    d = config.d_e
    d_img, d_txt = raw_dims
    shapes = {
        "lp_img.weight": (d, d_img), "lp_img.bias": (d,),
        "lp_txt.weight": (d, d_txt), "lp_txt.bias": (d,),
        "phi": (n_entities, d), "psi": (n_relations, d),
    }
    if config.kge_method == "transh":
        shapes["w_r"] = (n_relations, d)
    if config.fusion == "concat_mlp":
        shapes["fusion.w1"] = (d, 2 * d)
        shapes["fusion.b1"] = (d,)
        if config.fusion_layers == 2:
            shapes["fusion.w2"] = (d, d)
            shapes["fusion.b2"] = (d,)
    return shapes


def _params_from_arrays(config: TrainConfig, arrays: dict) -> ModelParams:
    fusion = FusionConfig(kind=config.fusion,
                          layers=0 if config.fusion == "addition" else config.fusion_layers)
    if config.fusion == "concat_mlp":
        fusion.weights = [arrays["fusion.w1"]]
        fusion.biases = [arrays["fusion.b1"]]
        if config.fusion_layers == 2:
            fusion.weights.append(arrays["fusion.w2"])
            fusion.biases.append(arrays["fusion.b2"])
    return ModelParams(
        lp_img=ProjectionLayer(arrays["lp_img.weight"], arrays["lp_img.bias"]),
        lp_txt=ProjectionLayer(arrays["lp_txt.weight"], arrays["lp_txt.bias"]),
        tables=EmbeddingTable(arrays["phi"], arrays["psi"], arrays.get("w_r")),
        fusion=fusion)


def init_state(config: TrainConfig, graph: KnowledgeGraph, catalog,
               stores: StoreBundle) -> TrainState:
    """Seeded initialization over the master entity vocabulary.

    The entity rows cover the union of catalog and graph entities in
    sorted QID order, so labels, triple endpoints, and negatives all
    index one table.
    """
    config.validate()
    entity_qids = sorted({e.qid for e in catalog} | set(graph.entity_qids))
    relation_pids = sorted(graph.relation_pids)
    tables = init_tables(len(entity_qids), len(relation_pids), config.d_e,
                         config.kge_method, config.seed)
    params = ModelParams(
        lp_img=init_projection(stores.image.dim, config.d_e, (config.seed, 2)),
        lp_txt=init_projection(stores.text.dim, config.d_e, (config.seed, 3)),
        tables=tables,
        fusion=init_fusion(config.fusion, config.d_e, config.fusion_layers,
                           config.seed),
    )
    return TrainState(config, entity_qids, relation_pids, params,
                      init_optimizer(params))


def init_optimizer(params: ModelParams) -> OptimizerState:
    """Zeroed moment accumulators mirroring every parameter shape."""
    arrays = param_arrays(params)
    return OptimizerState(m={n: np.zeros_like(a) for n, a in arrays.items()},
                          v={n: np.zeros_like(a) for n, a in arrays.items()})


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def build_batch(dataset, indices, graph: KnowledgeGraph, catalog_by_qid: dict,
                stores: StoreBundle, cfg: TrainConfig, epoch: int,
                entity_index: dict[str, int],
                relation_index: dict[str, int]) -> Batch:
    """Assemble raw inputs, labels, entity-side raws, and KE bundles.

    Triple caps and negatives are reseeded from (seed, epoch, entity id),
    so the same entity sees a fresh deterministic sample each epoch and
    identical (seed, epoch, indices) always yield an identical batch.
    """
    n = len(indices)
    img_raws = np.empty((n, stores.image.dim))
    txt_raws = np.empty((n, stores.text.dim))
    ent_text_raws = np.empty((n, stores.text.dim))
    labels = np.empty(n, dtype=np.int64)
    has_leads = np.zeros(n, dtype=bool)
    lead_raws, lead_slot = [], []
    pos_h, pos_r, pos_t, pos_slot, neg_h, neg_t = [], [], [], [], [], []
    triple_counts = np.zeros(n, dtype=np.int64)
    k = cfg.negatives_per_entity

    for slot, rec_idx in enumerate(indices):
        rec = dataset[int(rec_idx)]
        entry = catalog_by_qid.get(rec.label)
        if entry is None:
            raise ValueError(f"dataset label {rec.label!r} not in catalog")
        img_raws[slot] = stores.image.vector(rec.image_embedding_id)
        txt_raws[slot] = stores.text.vector(rec.text_query_embedding_id)
        ent_text_raws[slot] = stores.text.vector(entry.description_embedding_id)
        master = entity_index[rec.label]
        labels[slot] = master
        for lead_id in entry.lead_image_embedding_ids:
            lead_raws.append(np.asarray(stores.image.vector(lead_id), dtype=np.float64))
            lead_slot.append(slot)
            has_leads[slot] = True
        if graph.has_entity(rec.label) and graph.n_entities >= 2:
            kg_eid = graph.entity_id(rec.label)
            rng_t = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 6, epoch, master]))
            bundle = entity_triples(graph, kg_eid, cfg.triples_cap, rng_t)
            triple_counts[slot] = len(bundle)
            for j, t in enumerate(bundle):
                rng_n = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 7, epoch, master, j]))
                negs = sample_negatives(graph.entities, t, k, rng_n)
                pos_h.append(entity_index[graph.qid(t.head)])
                pos_r.append(relation_index[graph.pid(t.relation)])
                pos_t.append(entity_index[graph.qid(t.tail)])
                pos_slot.append(slot)
                neg_h.append([entity_index[graph.qid(x.head)] for x in negs])
                neg_t.append([entity_index[graph.qid(x.tail)] for x in negs])

    p = len(pos_h)
    return Batch(
        img_raws=img_raws, txt_raws=txt_raws, labels=labels,
        ent_text_raws=ent_text_raws,
        lead_raws=(np.stack(lead_raws) if lead_raws
                   else np.empty((0, stores.image.dim))),
        lead_slot=np.asarray(lead_slot, dtype=np.int64),
        has_leads=has_leads,
        pos_h=np.asarray(pos_h, dtype=np.int64),
        pos_r=np.asarray(pos_r, dtype=np.int64),
        pos_t=np.asarray(pos_t, dtype=np.int64),
        pos_slot=np.asarray(pos_slot, dtype=np.int64),
        neg_h=np.asarray(neg_h, dtype=np.int64).reshape(p, k if p else 0),
        neg_t=np.asarray(neg_t, dtype=np.int64).reshape(p, k if p else 0),
        triple_counts=triple_counts,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward(params: ModelParams, batch: Batch, cfg: TrainConfig):
    """Build the tape for every active loss term.

    Returns (breakdown floats, total Var or None, leaves dict). Terms with
    zero weight are skipped entirely so untouched parameters provably get
    no gradient.
    """
    leaves = {name: ag.leaf(arr) for name, arr in param_arrays(params).items()}
    w_img, b_img = leaves["lp_img.weight"], leaves["lp_img.bias"]
    w_txt, b_txt = leaves["lp_txt.weight"], leaves["lp_txt.bias"]
    phi, psi = leaves["phi"], leaves["psi"]
    n = batch.size

    def fused_inputs():
        z_img = ag.normalize_rows(ag.linear(batch.img_raws, w_img, b_img))
        z_txt = ag.normalize_rows(ag.linear(batch.txt_raws, w_txt, b_txt))
        if cfg.fusion == "addition":
            return ag.normalize_rows(ag.add(z_img, z_txt))
        h = ag.concat_cols(z_img, z_txt)
        for i in range(1, params.fusion.layers + 1):
            h = ag.relu(ag.linear(h, leaves[f"fusion.w{i}"], leaves[f"fusion.b{i}"]))
        return ag.normalize_rows(h)

    l_align = l_proxy = l_ke = None
    phi_batch = None
    if cfg.use_alignment or cfg.beta1 > 0:
        phi_batch = ag.gather_rows(phi, batch.labels)

    if cfg.use_alignment:
        l_align = L.symmetric_core(fused_inputs(), phi_batch, cfg.tau)

    if cfg.beta1 > 0:
        z_et = ag.normalize_rows(ag.linear(batch.ent_text_raws, w_txt, b_txt))
        idx_with = np.flatnonzero(batch.has_leads)
        idx_without = np.flatnonzero(~batch.has_leads)
        parts = []
        if idx_with.size:
            z_lead = ag.normalize_rows(ag.linear(batch.lead_raws, w_img, b_img))
            compact = np.searchsorted(idx_with, batch.lead_slot)
            z_mean = ag.segment_mean(z_lead, compact, idx_with.size)
            parts.append(ag.put_rows(n, idx_with, ag.normalize_rows(z_mean)))
        if idx_without.size:
            parts.append(ag.put_rows(n, idx_without, ag.gather_rows(z_et, idx_without)))
        z_ei = parts[0] if len(parts) == 1 else ag.add(parts[0], parts[1])
        l_proxy = L.proxy_core(phi_batch, z_et, z_ei, cfg.tau)

    if cfg.beta2 > 0 and batch.pos_h.size:
        k = batch.neg_h.shape[1]
        p = batch.pos_h.shape[0]
        h_pos = ag.gather_rows(phi, batch.pos_h)
        r_pos = ag.gather_rows(psi, batch.pos_r)
        t_pos = ag.gather_rows(phi, batch.pos_t)
        wr_pos = wr_neg = None
        if cfg.kge_method == "transh":
            w_r = leaves["w_r"]
            wr_pos = ag.gather_rows(w_r, batch.pos_r)
            wr_neg = ag.gather_rows(w_r, np.repeat(batch.pos_r, k))
        s_pos = L.score_rows_core(cfg.kge_method, h_pos, r_pos, t_pos, wr_pos)
        h_neg = ag.gather_rows(phi, batch.neg_h.ravel())
        r_neg = ag.gather_rows(psi, np.repeat(batch.pos_r, k))
        t_neg = ag.gather_rows(phi, batch.neg_t.ravel())
        s_neg = ag.reshape(
            L.score_rows_core(cfg.kge_method, h_neg, r_neg, t_neg, wr_neg), (p, k))
        red = 1.0 if cfg.ke_batch_reduction == "sum" else 1.0 / n
        weights = red / batch.triple_counts[batch.pos_slot] / k
        if cfg.kge_method == "transe_euclid":
            l_ke = L.ke_margin_core(s_pos, s_neg, cfg.margin, weights)
        else:
            l_ke = L.ke_softmax_core(s_pos, s_neg, cfg.tau, weights,
                                     cfg.include_positive_in_denominator)

    terms = []
    if l_align is not None:
        terms.append(l_align)
    if l_proxy is not None:
        terms.append(ag.scale(l_proxy, cfg.beta1))
    if l_ke is not None:
        terms.append(ag.scale(l_ke, cfg.beta2))
    total_var = None
    if terms:
        total_var = terms[0]
        for t in terms[1:]:
            total_var = ag.add(total_var, t)

    def val(v):
        return float(v.value) if v is not None else 0.0

    breakdown = L.LossBreakdown(
        alignment=val(l_align), proxy=val(l_proxy), ke=val(l_ke),
        total=val(total_var))
    for name, value in (("alignment", breakdown.alignment),
                        ("proxy", breakdown.proxy), ("ke", breakdown.ke),
                        ("total", breakdown.total)):
        if not math.isfinite(value):
            raise ValueError(f"non-finite {name} loss")
    return breakdown, total_var, leaves


def forward_value(params: ModelParams, batch: Batch, cfg: TrainConfig) -> float:
    """Total loss only (double precision), for finite-difference probing."""
    breakdown, _, _ = _forward(params, batch, cfg)
    return breakdown.total


def forward_backward(params: ModelParams, batch: Batch, cfg: TrainConfig,
                     dtype=np.float32) -> tuple[L.LossBreakdown, Gradients]:
    """Losses plus exact analytic gradients for every touched parameter.

    Raw backbone embeddings are constants and receive no gradient. Table
    gradients come back as dense arrays (zero outside touched rows) plus
    the touched-row index sets that drive sparse optimizer semantics.
    """
    breakdown, total_var, leaves = _forward(params, batch, cfg)
    if total_var is not None:
        ag.backward(total_var)
    arrays = {name: (lf.grad if lf.grad is not None
                     else np.zeros_like(lf.value)).astype(dtype)
              for name, lf in leaves.items()}

    phi_touched: list[np.ndarray] = []
    psi_touched: list[np.ndarray] = []
    if cfg.use_alignment or cfg.beta1 > 0:
        phi_touched.append(batch.labels)
    if cfg.beta2 > 0 and batch.pos_h.size:
        phi_touched += [batch.pos_h, batch.pos_t,
                        batch.neg_h.ravel(), batch.neg_t.ravel()]
        psi_touched.append(batch.pos_r)
    touched = {
        "phi": (np.unique(np.concatenate(phi_touched)) if phi_touched
                else np.empty(0, dtype=np.int64)),
        "psi": (np.unique(np.concatenate(psi_touched)) if psi_touched
                else np.empty(0, dtype=np.int64)),
    }
    if "w_r" in leaves:
        touched["w_r"] = touched["psi"] if cfg.kge_method == "transh" else \
            np.empty(0, dtype=np.int64)
    return breakdown, Gradients(arrays=arrays, touched=touched)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def adamw_step(params: ModelParams, grads: Gradients, opt: OptimizerState,
               lr: float, weight_decay: float,
               decay_embeddings: bool = True) -> tuple[ModelParams, OptimizerState]:
    """One decoupled-weight-decay update with bias-corrected moments.

    Decay multiplies parameters by ``(1 - lr*weight_decay)`` before the
    moment step. Table rows outside the touched sets get no update and no
    decay; hyperplane normals are renormalized to unit length afterwards.
    """
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, arr in param_arrays(params).items():
        g = grads.arrays[name].astype(np.float64)
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{g.shape} vs {arr.shape}")
        if name in TABLE_PARAMS:
            rows = grads.touched.get(name, np.empty(0, dtype=np.int64))
            if rows.size == 0:
                continue
            gr = g[rows]
            m, v = opt.m[name], opt.v[name]
            m[rows] = ADAM_BETA1 * m[rows] + (1.0 - ADAM_BETA1) * gr
            v[rows] = ADAM_BETA2 * v[rows] + (1.0 - ADAM_BETA2) * gr * gr
            if decay_embeddings and weight_decay:
                arr[rows] *= 1.0 - lr * weight_decay
            arr[rows] -= lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + ADAM_EPS)
            if name == "w_r":
                norms = np.linalg.norm(arr[rows], axis=1, keepdims=True)
                norms[norms == 0.0] = 1.0
                arr[rows] /= norms
        else:
            m, v = opt.m[name], opt.v[name]
            m[:] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v[:] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            if weight_decay:
                arr *= 1.0 - lr * weight_decay
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, opt


def lr_at_step(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` to 0 over the whole run."""
    if step < 0 or step > total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps == 0:
        return base_lr
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(params: ModelParams, batch: Batch, cfg: TrainConfig,
               fd_step: float, corrupt: bool = False) -> float:
    """Max relative error of analytic gradients vs central differences.

    Every trainable scalar touched by the batch is perturbed by
    ``+/- fd_step`` in double precision. ``corrupt`` deliberately damages
    one analytic gradient entry; it exists as a negative control for the
    checker itself.
    """
    if not fd_step > 0:
        raise ValueError("fd_step must be > 0")
    _, grads = forward_backward(params, batch, cfg, dtype=np.float64)
    if corrupt:
        g = grads.arrays["lp_txt.weight"]
        g.flat[0] += 0.5 * (abs(g.flat[0]) + 1.0)
    worst = 0.0
    for name, arr in param_arrays(params).items():
        g = grads.arrays[name]
        if name in TABLE_PARAMS:
            rows = grads.touched.get(name, np.empty(0, dtype=np.int64))
            positions = [(int(r), int(c)) for r in rows for c in range(arr.shape[1])]
        else:
            positions = list(np.ndindex(arr.shape))
        for pos in positions:
            orig = arr[pos]
            arr[pos] = orig + fd_step
            hi = forward_value(params, batch, cfg)
            arr[pos] = orig - fd_step
            lo = forward_value(params, batch, cfg)
            arr[pos] = orig
            num = (hi - lo) / (2.0 * fd_step)
            ana = float(g[pos])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(config: TrainConfig, dataset, graph: KnowledgeGraph, catalog,
          stores: StoreBundle, checkpoint_path=None,
          loss_log_path=None) -> tuple[TrainState, list[EpochStats]]:
    """Epoch loop with seeded shuffling; returns the final state and log.

    Single-threaded and bit-deterministic given the config: identical
    configs produce identical checkpoints. ``epochs=0`` returns the
    untouched initialization.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    catalog_by_qid = {e.qid: e for e in catalog}
    state = init_state(config, graph, catalog, stores)
    relation_index = {p: i for i, p in enumerate(state.relation_pids)}
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log: list[EpochStats] = []
    log_fh = open(loss_log_path, "w", encoding="utf-8") if loss_log_path else None
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, 5, epoch]))
            perm = rng.permutation(n)
            sums = np.zeros(4)
            n_batches = 0
            lr_first: Optional[float] = None
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                batch = build_batch(dataset, idx, graph, catalog_by_qid, stores,
                                    config, epoch, state.entity_index,
                                    relation_index)
                breakdown, grads = forward_backward(state.params, batch, config)
                lr = lr_at_step(state.opt.step, total_steps, config.base_lr)
                if lr_first is None:
                    lr_first = lr
                adamw_step(state.params, grads, state.opt, lr,
                           config.weight_decay, config.decay_embeddings)
                sums += (breakdown.alignment, breakdown.proxy, breakdown.ke,
                         breakdown.total)
                n_batches += 1
            means = sums / n_batches
            stats = EpochStats(epoch=epoch + 1, alignment=float(means[0]),
                               proxy=float(means[1]), ke=float(means[2]),
                               total=float(means[3]), lr=float(lr_first))
            log.append(stats)
            if log_fh:
                log_fh.write(stats.to_json_line() + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state, log
