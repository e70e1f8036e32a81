"""Model assembly: paired prompt encoders, verbalizer, and the cached
knowledge feature pipeline that feeds entity injections into the knowledge
encoder.

The pipeline links each document against the entity catalog once, builds the
one-hop subgraph of all linked entities, trains node embeddings on it a
single time, and caches per-document structural vectors. Injection vectors
are the sum of an entity's structural vector and the (trainable) mean token
embedding of its name, added at the mention's token positions.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import ToyEncoder
from .kg import (
    Entity,
    Subgraph,
    Triple,
    aggregate_neighbors,
    build_subgraph,
    link_entities,
    train_node_embeddings,
    NodeEmbeddingTable,
    tokenize_with_spans,
)
from .losses import Verbalizer, init_verbalizer
from .taxonomy import Taxonomy
from .text import Vocab, split_tokens

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    max_len: int = 256
    seed: int = 0
    verbalizer_bias: bool = False


class PromptModel(nn.Module):
    """Knowledge-prompt encoder, context-prompt encoder, per-level verbalizer."""

    def __init__(self, vocab: Vocab, taxonomy: Taxonomy, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.taxonomy = taxonomy
        self.knowledge_encoder = ToyEncoder(
            len(vocab), config.d_model, config.n_blocks, config.n_heads,
            config.max_len, seed=config.seed,
        )
        self.context_encoder = ToyEncoder(
            len(vocab), config.d_model, config.n_blocks, config.n_heads,
            config.max_len, seed=config.seed + 1,
        )
        self.verbalizer: Verbalizer | None = None
        self.structural_params: nn.ParameterDict | None = None

    def attach_structural_parameters(self, table: NodeEmbeddingTable) -> None:
        """Promote frozen node vectors to trainable parameters (opt-in)."""
        self.structural_params = nn.ParameterDict(
            {
                str(node): nn.Parameter(torch.from_numpy(vec).to(torch.float64))
                for node, vec in table.items()
            }
        )

    def attach_verbalizer(self, explanations: dict[int, list[str]]) -> None:
        self.verbalizer = init_verbalizer(
            explanations, self.context_encoder, self.vocab, self.taxonomy,
            use_bias=self.config.verbalizer_bias,
        )

    def entity_name_embedding(self, name: str) -> torch.Tensor:
        """Mean knowledge-encoder token embedding of the entity's name tokens."""
        ids = [self.vocab.id(t) for t in split_tokens(name)]
        if not ids:
            return torch.zeros(self.config.d_model, dtype=torch.float64)
        return self.knowledge_encoder.tok_emb(torch.tensor(ids, dtype=torch.long)).mean(0)


@dataclass
class EntityInjection:
    """One linked entity: its doc-token span and cached structural vector."""

    entity: Entity
    token_span: tuple[int, int]  # [start, end) in document token coordinates
    structural: np.ndarray | None  # None when the entity is outside the table
    agg_ids: tuple[int, ...] | None = None  # self + sampled neighbors behind the mean


def _doc_seed(doc_id: str, seed: int) -> int:
    return (zlib.crc32(doc_id.encode("utf-8")) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF


class KnowledgePipeline:
    """Entity links, node embeddings, and per-document injection features.

    fit() trains the embedding table exactly once; features() are cached per
    document id and reproduce bit-identically for a given pipeline seed, also
    after reloading the table from a checkpoint.
    """

    def __init__(
        self,
        catalog: list[Entity],
        triples: list[Triple],
        d_model: int,
        k_neighbors: int = 3,
        seed: int = 0,
        walks_per_node: int = 10,
        walk_length: int = 20,
        window: int = 5,
        negatives: int = 5,
        epochs: int = 5,
    ):
        self.catalog = catalog
        self.triples = triples
        self.d_model = d_model
        self.k_neighbors = k_neighbors
        self.seed = seed
        self._n2v = dict(
            walks_per_node=walks_per_node, walk_length=walk_length,
            window=window, negatives=negatives, epochs=epochs,
        )
        self.table: NodeEmbeddingTable | None = None
        self.embedding_train_calls = 0
        self._cache: dict[str, list[EntityInjection]] = {}

    def fit(self, documents) -> None:
        """Link the corpus, build its one-hop subgraph, train embeddings once."""
        linked: set[int] = set()
        for doc in documents:
            linked.update(e.id for _, e in link_entities(doc.text, self.catalog))
        if not linked:
            log.warning("no entities linked in corpus; knowledge features are empty")
            self.table = None
            return
        subgraph = build_subgraph(linked, self.triples)
        self.table = train_node_embeddings(
            subgraph, dim=self.d_model, seed=self.seed, **self._n2v
        )
        self.embedding_train_calls += 1

    def load_table(self, table: NodeEmbeddingTable | None) -> None:
        if table is not None and table.dim != self.d_model:
            raise ValueError(
                f"embedding table dim {table.dim} != encoder width {self.d_model}"
            )
        self.table = table

    def features(self, doc_id: str, text: str) -> list[EntityInjection]:
        if doc_id in self._cache:
            return self._cache[doc_id]
        links = link_entities(text, self.catalog)
        token_spans = self._token_spans(text, links)
        out: list[EntityInjection] = []
        covered = [
            (ent, span)
            for (_, ent), span in zip(links, token_spans)
            if self.table is not None and ent.id in self.table
        ]
        if covered:
            subgraph = self._known_subgraph({ent.id for ent, _ in covered})
            vectors, id_tuples = aggregate_neighbors(
                self.table,
                subgraph,
                [ent.id for ent, _ in covered],
                k=self.k_neighbors,
                seed=_doc_seed(doc_id, self.seed),
                return_ids=True,
            )
            known = {
                ent.id: (vec, ids)
                for (ent, _), vec, ids in zip(covered, vectors, id_tuples)
            }
        else:
            known = {}
        for (_, ent), span in zip(links, token_spans):
            vec, ids = known.get(ent.id, (None, None))
            out.append(
                EntityInjection(entity=ent, token_span=span, structural=vec, agg_ids=ids)
            )
        self._cache[doc_id] = out
        return out

    def _known_subgraph(self, linked: set[int]) -> Subgraph:
        """One-hop subgraph restricted to table-covered nodes, so neighbor
        sampling is stable no matter which corpus the table was fit on."""
        g = build_subgraph(linked, self.triples)
        nodes = {n for n in g.nodes if n in self.table}
        edges = {e for e in g.edges if e.head in nodes and e.tail in nodes}
        return Subgraph(nodes, edges)

    @staticmethod
    def _token_spans(text: str, links) -> list[tuple[int, int]]:
        tokens = tokenize_with_spans(text)
        spans = []
        for mention, _ in links:
            idx = [
                i for i, (_, s, e) in enumerate(tokens)
                if s >= mention.start and e <= mention.end
            ]
            spans.append((idx[0], idx[-1] + 1) if idx else (0, 0))
        return spans


def save_checkpoint(path: str, model: PromptModel, table, extras: dict) -> None:
    """Binary checkpoint: model parameters, vocab, embedding table, run extras.

    float64 tensors round-trip exactly through torch serialization.
    """
    table_blob = None
    if table is not None:
        table_blob = {node: torch.from_numpy(vec) for node, vec in table.items()}
    torch.save(
        {
            "model_state": model.state_dict(),
            "vocab_tokens": [model.vocab.token(i) for i in range(len(model.vocab))],
            "model_config": vars(model.config),
            "verbalizer_sizes": [
                len(v) for v in model.taxonomy.level_vocab
            ],
            "structural_nodes": (
                sorted(int(k) for k in model.structural_params)
                if model.structural_params is not None
                else None
            ),
            "kg_table": table_blob,
            "extras": extras,
        },
        path,
    )


def load_checkpoint(path: str, taxonomy: Taxonomy):
    """Rebuild (model, table, extras) from a checkpoint; exact round-trip."""
    from .kg import NodeEmbeddingTable
    from .losses import Verbalizer
    from .text import Vocab as VocabCls

    blob = torch.load(path, weights_only=False)
    vocab = VocabCls(blob["vocab_tokens"])
    config = ModelConfig(**blob["model_config"])
    if blob["verbalizer_sizes"] != [len(v) for v in taxonomy.level_vocab]:
        raise ValueError("checkpoint verbalizer does not match the given taxonomy")
    model = PromptModel(vocab, taxonomy, config)
    model.verbalizer = Verbalizer(
        [
            torch.zeros(size, config.d_model, dtype=torch.float64)
            for size in blob["verbalizer_sizes"]
        ],
        use_bias=config.verbalizer_bias,
    )
    if blob.get("structural_nodes"):
        model.structural_params = torch.nn.ParameterDict(
            {
                str(node): torch.nn.Parameter(
                    torch.zeros(config.d_model, dtype=torch.float64)
                )
                for node in blob["structural_nodes"]
            }
        )
    model.load_state_dict(blob["model_state"])
    table = None
    if blob["kg_table"] is not None:
        table = NodeEmbeddingTable(
            {node: t.numpy() for node, t in blob["kg_table"].items()}
        )
    return model, table, blob["extras"]


def build_injections(
    model: PromptModel,
    prompt_text_start: int,
    prompt_text_end: int,
    features: list[EntityInjection],
    structural_params: "torch.nn.ParameterDict | None" = None,
) -> dict[int, torch.Tensor]:
    """Position -> vector map for one knowledge prompt.

    Each token of a mention receives the entity's semantic + structural
    vector; tokens truncated out of the prompt are skipped. When
    structural_params is given, the structural part is recomputed in-graph
    as the mean over the cached aggregation ids, so node vectors train
    end-to-end; otherwise the frozen cached mean is used.
    """
    injections: dict[int, torch.Tensor] = {}
    for feat in features:
        vec = model.entity_name_embedding(feat.entity.name)
        if (
            structural_params is not None
            and feat.agg_ids is not None
            and all(str(i) in structural_params for i in feat.agg_ids)
        ):
            vec = vec + torch.stack(
                [structural_params[str(i)] for i in feat.agg_ids]
            ).mean(0)
        elif feat.structural is not None:
            vec = vec + torch.from_numpy(feat.structural).to(torch.float64)
        for tok in range(*feat.token_span):
            pos = prompt_text_start + tok
            if pos < prompt_text_end:
                injections[pos] = injections.get(
                    pos, torch.zeros(vec.shape[0], dtype=torch.float64)
                ) + vec
    return injections
