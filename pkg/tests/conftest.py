"""Shared fixtures: a small loaded corpus and tiny gradient-check instances."""

import numpy as np
import pytest

from knowcol.dataio import (
    StoreBundle,
    load_catalog,
    load_dataset,
    load_embedding_store,
    load_triples_tsv,
    synth_fixture,
)
from knowcol.graphstore import build_graph
from knowcol.trainer import TrainConfig


class Corpus:
    """Everything train()/eval need, loaded from a synth fixture directory."""

    def __init__(self, paths):
        self.paths = paths
        self.graph = build_graph(load_triples_tsv(paths.triples))
        self.catalog = load_catalog(paths.catalog)
        self.stores = StoreBundle(image=load_embedding_store(paths.image_store),
                                  text=load_embedding_store(paths.text_store))
        labels = {e.qid for e in self.catalog}
        self.train_dataset = load_dataset(paths.train_dataset, known_labels=labels)
        self.test_dataset = load_dataset(paths.test_dataset, known_labels=labels)
        self.catalog_by_qid = {e.qid: e for e in self.catalog}


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    paths = synth_fixture(8, 8, seed=7, out_dir=tmp_path_factory.mktemp("corpus"))
    return Corpus(paths)


@pytest.fixture
def small_config():
    return TrainConfig(d_e=6, batch_size=4, epochs=3, base_lr=0.01,
                       triples_cap=4, negatives_per_entity=3, seed=7)


def make_random_instance(seed, kge_method="transe_cos", fusion="addition",
                         include_positive=False, fusion_layers=1,
                         use_alignment=True, beta1=1.0, beta2=1.0, tau=0.07):
    """A tiny random training instance for finite-difference checks.

    Raw image and text dims differ on purpose to catch transposition bugs.
    """
    from knowcol.dataio import EmbeddingStore, EntityCatalogEntry, DatasetRecord
    from knowcol.trainer import build_batch, init_state

    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    n_entities, d_img, d_txt = 6, 5, 7
    qids = [f"Q{i}" for i in range(1, n_entities + 1)]
    pids = ["P31", "P17"]
    triples = []
    for i in range(n_entities):
        triples.append((qids[i], pids[i % 2], qids[(i + 2) % n_entities]))
        triples.append((qids[i], "P31", qids[(i + 1) % n_entities]))
    graph = build_graph(triples)

    image = EmbeddingStore(d_img)
    text = EmbeddingStore(d_txt)
    catalog = []
    for i, q in enumerate(qids):
        text.add(f"t:{q}", rng.normal(size=d_txt).astype(np.float32))
        leads = []
        for j in range(i % 3):
            image.add(f"l:{q}:{j}", rng.normal(size=d_img).astype(np.float32))
            leads.append(f"l:{q}:{j}")
        catalog.append(EntityCatalogEntry(q, f"t:{q}", tuple(leads), "seen"))
    records = []
    for i, q in enumerate(qids[:3]):
        image.add(f"x:{q}", rng.normal(size=d_img).astype(np.float32))
        text.add(f"y:{q}", rng.normal(size=d_txt).astype(np.float32))
        records.append(DatasetRecord(f"x:{q}", f"y:{q}", q))
    stores = StoreBundle(image=image, text=text)

    cfg = TrainConfig(d_e=3, batch_size=3, epochs=1, triples_cap=2,
                      negatives_per_entity=2, kge_method=kge_method,
                      fusion=fusion, fusion_layers=fusion_layers,
                      include_positive_in_denominator=include_positive,
                      use_alignment=use_alignment, beta1=beta1, beta2=beta2,
                      tau=tau, seed=seed)
    state = init_state(cfg, graph, catalog, stores)
    # keep MLP units alive and clear of the ReLU kink for FD probing
    for b in state.params.fusion.biases:
        b += 0.3
    relation_index = {p: i for i, p in enumerate(state.relation_pids)}
    batch = build_batch(records, np.arange(3), graph,
                        {e.qid: e for e in catalog}, stores, cfg, epoch=0,
                        entity_index=state.entity_index,
                        relation_index=relation_index)
    return state, batch, cfg
