"""File formats and loaders: triple TSVs, embedding stores, catalogs,
datasets, checkpoints, and deterministic synthetic fixtures.

All binary round-trips are bit-exact, and every loader rejects malformed
input with an error that names the file location; nothing is loaded
partially or silently. Raw embeddings are produced by external frozen
backbones and enter through :class:`EmbeddingStore`, keyed by opaque
string ids so real exports and synthetic fixtures share one path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "EmbeddingStore",
    "EntityCatalogEntry",
    "DatasetRecord",
    "StoreBundle",
    "load_triples_tsv",
    "save_triples_tsv",
    "load_seed_qids",
    "load_embedding_store",
    "save_embedding_store",
    "load_catalog",
    "save_catalog",
    "load_dataset",
    "save_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "synth_fixture",
    "SynthPaths",
]

STORE_MAGIC = b"KCLE"
STORE_VERSION = 1
CHECKPOINT_MAGIC = b"KCCK"
CHECKPOINT_VERSION = 1

SPLITS = ("seen", "unseen")


# ---------------------------------------------------------------------------
# Triple TSV
# ---------------------------------------------------------------------------

def load_triples_tsv(path) -> list[tuple[str, str, str]]:
    """Parse a triple dump: one ``head<TAB>pid<TAB>tail`` per line.

    Blank lines and lines starting with ``#`` are skipped. Any line with
    the wrong field count or an empty field raises with its 1-based line
    number.
    """
    out: list[tuple[str, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}: line {lineno}: expected 3 tab-separated fields, "
                    f"got {len(fields)}")
            if any(not f for f in fields):
                raise ValueError(f"{path}: line {lineno}: empty field")
            out.append((fields[0], fields[1], fields[2]))
    return out


def save_triples_tsv(triples, path) -> None:
    """Write (head, pid, tail) string tuples, one per line, LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h, p, t in triples:
            fh.write(f"{h}\t{p}\t{t}\n")


def load_seed_qids(path) -> list[str]:
    """Seed-entity file: one QID per line; blanks and ``#`` comments skipped."""
    out: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" in line or " " in line:
                raise ValueError(f"{path}: line {lineno}: expected a single QID")
            out.append(line)
    return out


# ---------------------------------------------------------------------------
# Embedding store (KCLE)
# ---------------------------------------------------------------------------

class EmbeddingStore:
    """Immutable-after-load map from string id to a float32 vector.

    Every vector has the same dimension ``dim``; insertion order is the
    on-disk record order.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self._records: dict[str, np.ndarray] = {}

    def add(self, rec_id: str, vec) -> None:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (self.dim,):
            raise ValueError(f"vector for {rec_id!r} has shape {vec.shape}, "
                             f"expected ({self.dim},)")
        if rec_id in self._records:
            raise ValueError(f"duplicate embedding id {rec_id!r}")
        self._records[rec_id] = vec

    def vector(self, rec_id: str) -> np.ndarray:
        try:
            return self._records[rec_id]
        except KeyError:
            raise ValueError(f"unknown embedding id {rec_id!r}") from None

    def has(self, rec_id: str) -> bool:
        return rec_id in self._records

    def ids(self) -> list[str]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


def save_embedding_store(store: EmbeddingStore, path) -> None:
    """Write the KCLE binary format (all little-endian).

    Layout: magic ``KCLE``, u32 version, u32 dim, u64 count, then per
    record: u32 id byte-length, id bytes (UTF-8), dim x f32.
    """
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IIQ", STORE_VERSION, store.dim, len(store)))
        for rec_id in store.ids():
            id_bytes = rec_id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(store.vector(rec_id).astype("<f4").tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"{path}: truncated file while reading {what}")
    return data


def load_embedding_store(path) -> EmbeddingStore:
    """Read a KCLE file; rejects bad magic/version, truncation, NaN/Inf."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != STORE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
        version, dim, count = struct.unpack("<IIQ", _read_exact(fh, 16, path, "header"))
        if version != STORE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        store = EmbeddingStore(dim)
        for i in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, path, f"record {i} id length"))
            rec_id = _read_exact(fh, id_len, path, f"record {i} id").decode("utf-8")
            vec = np.frombuffer(
                _read_exact(fh, 4 * dim, path, f"record {i} payload"), dtype="<f4").copy()
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}: non-finite component in record {rec_id!r}")
            store.add(rec_id, vec)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} records")
    return store


# ---------------------------------------------------------------------------
# Entity catalog (JSONL)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EntityCatalogEntry:
    """One entity's description embedding, lead-image embeddings, and split."""

    qid: str
    description_embedding_id: str
    lead_image_embedding_ids: tuple[str, ...]
    split: str  # "seen" | "unseen"


_CATALOG_KEYS = ("qid", "description_embedding_id", "lead_image_embedding_ids", "split")


def load_catalog(path) -> list[EntityCatalogEntry]:
    """Parse a JSONL catalog, preserving file order; duplicate QIDs error."""
    entries: list[EntityCatalogEntry] = []
    seen_qids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            for key in _CATALOG_KEYS:
                if key not in obj:
                    raise ValueError(f"{path}: line {lineno}: missing key {key!r}")
            if obj["split"] not in SPLITS:
                raise ValueError(
                    f"{path}: line {lineno}: unknown split {obj['split']!r}")
            qid = obj["qid"]
            if qid in seen_qids:
                raise ValueError(f"{path}: line {lineno}: duplicate qid {qid}")
            seen_qids.add(qid)
            leads = obj["lead_image_embedding_ids"]
            if not isinstance(leads, list) or not all(isinstance(x, str) for x in leads):
                raise ValueError(
                    f"{path}: line {lineno}: lead_image_embedding_ids must be a "
                    "list of strings")
            entries.append(EntityCatalogEntry(
                qid=qid,
                description_embedding_id=obj["description_embedding_id"],
                lead_image_embedding_ids=tuple(leads),
                split=obj["split"],
            ))
    return entries


def save_catalog(entries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for e in entries:
            fh.write(json.dumps({
                "qid": e.qid,
                "description_embedding_id": e.description_embedding_id,
                "lead_image_embedding_ids": list(e.lead_image_embedding_ids),
                "split": e.split,
            }, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Dataset (JSONL)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    """One training/test example: raw input embedding ids plus the gold QID."""

    image_embedding_id: str
    text_query_embedding_id: str
    label: str


_DATASET_KEYS = ("image_embedding_id", "text_query_embedding_id", "label")


def load_dataset(path, known_labels=None) -> list[DatasetRecord]:
    """Parse a dataset JSONL; optionally validate labels against a catalog."""
    records: list[DatasetRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            for key in _DATASET_KEYS:
                if key not in obj:
                    raise ValueError(f"{path}: line {lineno}: missing key {key!r}")
            if known_labels is not None and obj["label"] not in known_labels:
                raise ValueError(
                    f"{path}: line {lineno}: label {obj['label']!r} not in catalog")
            records.append(DatasetRecord(
                image_embedding_id=obj["image_embedding_id"],
                text_query_embedding_id=obj["text_query_embedding_id"],
                label=obj["label"],
            ))
    return records


def save_dataset(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for r in records:
            fh.write(json.dumps({
                "image_embedding_id": r.image_embedding_id,
                "text_query_embedding_id": r.text_query_embedding_id,
                "label": r.label,
            }, sort_keys=True) + "\n")


@dataclass(frozen=True)
class StoreBundle:
    """The two raw-embedding stores consumed by training and inference."""

    image: EmbeddingStore
    text: EmbeddingStore


# ---------------------------------------------------------------------------
# Checkpoint (KCCK)
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint_raw(blob: dict, tensors: dict[str, np.ndarray], path) -> None:
    """Write the KCCK container: JSON blob + named f32 tensor sections."""
    payload = _canonical_json(blob)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for name, tensor in tensors.items():
            arr = np.asarray(tensor, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def read_checkpoint_raw(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a KCCK container back into (blob, {name: f32 array})."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, path, "blob length"))
        blob = json.loads(_read_exact(fh, blob_len, path, "config blob").decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError(f"{path}: truncated file while reading tensor name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, path, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, f"{name} rank"))
            dims = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, path, f"{name} dims"))[0]
                for _ in range(rank))
            n_items = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(
                _read_exact(fh, 4 * n_items, path, f"{name} payload"), dtype="<f4")
            if name in tensors:
                raise ValueError(f"{path}: duplicate tensor {name!r}")
            tensors[name] = data.reshape(dims).copy()
    return blob, tensors


def save_checkpoint(state, path) -> None:
    """Serialize a trainer state (config, tables, layers, optimizer, step)."""
    write_checkpoint_raw(state.to_blob(), state.to_tensors(), path)


def load_checkpoint(path):
    """Load a checkpoint back into a trainer state, validating shapes."""
    from .trainer import TrainState  # deferred: dataio is a lower layer

    blob, tensors = read_checkpoint_raw(path)
    return TrainState.from_checkpoint(blob, tensors, source=str(path))


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthPaths:
    """Locations of everything :func:`synth_fixture` wrote."""

    out_dir: Path
    triples: Path
    catalog: Path
    image_store: Path
    text_store: Path
    train_dataset: Path
    test_dataset: Path
    config: Path


TRAIN_RECORDS_PER_ENTITY = 3
TEST_RECORDS_PER_ENTITY = 2
NOISE_SCALE = 0.02


def _entity_directions(n: int, dim: int, rng) -> np.ndarray:
    """Well-separated unit rows: orthonormal when n <= dim."""
    if n <= dim:
        g = rng.normal(size=(dim, dim))
        q, _ = np.linalg.qr(g)
        return q[:n]
    vecs = rng.normal(size=(n, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def synth_fixture(n_entities: int, dim: int, seed: int, out_dir) -> SynthPaths:
    """Write a deterministic, separable toy corpus for desk-scale runs.

    Entities sit at well-separated unit vectors; raw image/text embeddings
    are the entity vector plus small seeded noise. The triple set is an
    association ring plus hierarchy edges. The last fifth of the entities
    (at least one) is tagged unseen and gets no training records.
    """
    if n_entities < 4:
        raise ValueError("n_entities must be >= 4")
    if dim < 4:
        raise ValueError("dim must be >= 4")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 91]))

    qids = [f"Q{i + 1}" for i in range(n_entities)]
    base = _entity_directions(n_entities, dim, rng)

    def noisy(i: int) -> np.ndarray:
        return base[i] + rng.normal(scale=NOISE_SCALE, size=dim)

    # association ring + hierarchy edges toward lower-index entities
    triples: list[tuple[str, str, str]] = []
    for i in range(n_entities):
        triples.append((qids[i], "P17", qids[(i + 1) % n_entities]))
        parent = i // 2
        if parent != i:
            triples.append((qids[i], "P31", qids[parent]))

    n_unseen = max(1, n_entities // 5)
    splits = ["seen"] * (n_entities - n_unseen) + ["unseen"] * n_unseen

    image_store = EmbeddingStore(dim)
    text_store = EmbeddingStore(dim)
    entries: list[EntityCatalogEntry] = []
    for i, qid in enumerate(qids):
        text_store.add(f"t:{qid}", noisy(i))
        leads = []
        for j in range(i % 3):
            lead_id = f"img:{qid}:{j}"
            image_store.add(lead_id, noisy(i))
            leads.append(lead_id)
        entries.append(EntityCatalogEntry(
            qid=qid,
            description_embedding_id=f"t:{qid}",
            lead_image_embedding_ids=tuple(leads),
            split=splits[i],
        ))

    train_records: list[DatasetRecord] = []
    test_records: list[DatasetRecord] = []
    for i, qid in enumerate(qids):
        if splits[i] == "seen":
            for j in range(TRAIN_RECORDS_PER_ENTITY):
                img_id, txt_id = f"x_img:{qid}:{j}", f"x_txt:{qid}:{j}"
                image_store.add(img_id, noisy(i))
                text_store.add(txt_id, noisy(i))
                train_records.append(DatasetRecord(img_id, txt_id, qid))
        for j in range(TEST_RECORDS_PER_ENTITY):
            img_id, txt_id = f"q_img:{qid}:{j}", f"q_txt:{qid}:{j}"
            image_store.add(img_id, noisy(i))
            text_store.add(txt_id, noisy(i))
            test_records.append(DatasetRecord(img_id, txt_id, qid))

    paths = SynthPaths(
        out_dir=out_dir,
        triples=out_dir / "triples.tsv",
        catalog=out_dir / "catalog.jsonl",
        image_store=out_dir / "images.kcle",
        text_store=out_dir / "texts.kcle",
        train_dataset=out_dir / "train.jsonl",
        test_dataset=out_dir / "test.jsonl",
        config=out_dir / "config.json",
    )
    save_triples_tsv(triples, paths.triples)
    save_catalog(entries, paths.catalog)
    save_embedding_store(image_store, paths.image_store)
    save_embedding_store(text_store, paths.text_store)
    save_dataset(train_records, paths.train_dataset)
    save_dataset(test_records, paths.test_dataset)

    config = {
        "d_e": 16,
        "batch_size": 8,
        "epochs": 50,
        "base_lr": 0.01,
        "weight_decay": 1e-4,
        "tau": 0.07,
        "beta1": 1.0,
        "beta2": 1.0,
        "kge_method": "transe_cos",
        "margin": 1.0,
        "triples_cap": 50,
        "negatives_per_entity": 25,
        "fusion": "addition",
        "fusion_layers": 1,
        "seed": int(seed),
        "ke_batch_reduction": "mean",
        "include_positive_in_denominator": False,
        "use_alignment": True,
        "decay_embeddings": True,
        "paths": {
            "triples": str(paths.triples),
            "catalog": str(paths.catalog),
            "image_store": str(paths.image_store),
            "text_store": str(paths.text_store),
            "train_dataset": str(paths.train_dataset),
            "test_dataset": str(paths.test_dataset),
            "out_dir": str(out_dir / "run"),
        },
    }
    with open(paths.config, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
