"""Knowledge-guided contrastive learning over frozen backbone embeddings.

Trains entity/relation embedding tables and linear projection layers with
alignment, proxy, and knowledge-embedding losses, and performs
retrieval-based open-domain entity recognition with seen/unseen/harmonic
mean evaluation, plus Wikidata subgraph extraction tooling.
"""

from .dataio import (
    DatasetRecord,
    EmbeddingStore,
    EntityCatalogEntry,
    StoreBundle,
    load_catalog,
    load_checkpoint,
    load_dataset,
    load_embedding_store,
    load_triples_tsv,
    save_checkpoint,
    save_embedding_store,
    synth_fixture,
)
from .encoders import (
    EmbeddingTable,
    FusionConfig,
    ModelParams,
    ProjectionLayer,
    encode_entity,
    fuse,
    init_tables,
    lookup,
    project,
)
from .graphstore import (
    KnowledgeGraph,
    Triple,
    build_graph,
    entity_triples,
    expand_entity_set,
    induced_subgraph,
    sample_negatives,
)
from .inference import (
    CandidateIndex,
    EvalReport,
    build_candidate_index,
    evaluate,
    retrieve_topk,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    alignment_loss,
    contrastive_loss,
    ke_loss_margin,
    ke_loss_softmax,
    proxy_loss,
    score_triple,
    symmetric_contrastive_loss,
    total_loss,
)
from .trainer import (
    Batch,
    ConfigError,
    TrainConfig,
    TrainState,
    adamw_step,
    build_batch,
    forward_backward,
    grad_check,
    init_state,
    lr_at_step,
    train,
)

__version__ = "0.1.0"
