"""Knowledge pipeline: gazetteer entity linking, one-hop subgraphs, biased
random-walk node embeddings, and random-neighbor average aggregation.

Entity ids are integers; relations are opaque strings. Walks treat edges as
undirected. Everything that samples takes an explicit seed and is
deterministic given it.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

CONTEXT_WINDOW = 10  # tokens on each side of a mention used for disambiguation


@dataclass(frozen=True)
class Triple:
    head: int
    relation: str
    tail: int


@dataclass(frozen=True)
class Mention:
    surface: str
    start: int  # character offsets in the source document, [start, end)
    end: int


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    aliases: frozenset[str]
    description: tuple[str, ...]
    prior: float

    def __post_init__(self):
        if not 0.0 <= self.prior <= 1.0:
            raise ValueError(f"entity {self.id}: prior {self.prior} outside [0,1]")


class Subgraph:
    def __init__(self, nodes: set[int], edges: set[Triple]):
        for e in edges:
            if e.head not in nodes or e.tail not in nodes:
                raise ValueError(f"edge {e} has endpoint outside node set")
        self.nodes = frozenset(nodes)
        self.edges = frozenset(edges)
        adj: dict[int, set[int]] = {n: set() for n in self.nodes}
        for e in self.edges:
            if e.head != e.tail:
                adj[e.head].add(e.tail)
                adj[e.tail].add(e.head)
        self._adj = {n: sorted(nbrs) for n, nbrs in adj.items()}

    def neighbors(self, node: int) -> list[int]:
        return self._adj[node]

    def degree(self, node: int) -> int:
        return len(self._adj[node])


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    """Case-folded tokens with their [start, end) character offsets."""
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _phrase(text: str) -> tuple[str, ...]:
    return tuple(tok for tok, _, _ in tokenize_with_spans(text))


def link_entities(
    document: str,
    catalog: Sequence[Entity],
    k_candidates: int = 5,
    lambda_ctx: float = 1.0,
) -> list[tuple[Mention, Entity]]:
    """Longest-match gazetteer linking with prior + context-Jaccard ranking.

    Mentions are detected by a case-folded, non-overlapping, left-to-right
    longest match over catalog names and aliases. Each mention's candidates
    (capped at `k_candidates` by descending prior) are scored by
    prior + lambda_ctx * Jaccard(window tokens, description tokens) over a
    +/-CONTEXT_WINDOW-token window around the mention; ties break toward the
    smaller entity id.
    """
    if not catalog:
        raise ValueError("catalog is empty")
    if k_candidates < 1:
        raise ValueError("k_candidates must be >= 1")

    gazetteer: dict[tuple[str, ...], list[Entity]] = {}
    for ent in catalog:
        for surface in {ent.name, *ent.aliases}:
            phrase = _phrase(surface)
            if phrase:
                gazetteer.setdefault(phrase, []).append(ent)
    max_len = max(len(p) for p in gazetteer)

    tokens = tokenize_with_spans(document)
    words = [t for t, _, _ in tokens]
    links: list[tuple[Mention, Entity]] = []
    i = 0
    while i < len(tokens):
        match = None
        for n in range(min(max_len, len(tokens) - i), 0, -1):
            phrase = tuple(words[i : i + n])
            if phrase in gazetteer:
                match = (n, gazetteer[phrase])
                break
        if match is None:
            i += 1
            continue
        n, candidates = match
        candidates = sorted(candidates, key=lambda e: (-e.prior, e.id))[:k_candidates]
        window = set(words[max(0, i - CONTEXT_WINDOW) : i]) | set(
            words[i + n : i + n + CONTEXT_WINDOW]
        )
        best = max(
            candidates,
            key=lambda e: (e.prior + lambda_ctx * _jaccard(window, set(e.description)), -e.id),
        )
        mention = Mention(
            surface=document[tokens[i][1] : tokens[i + n - 1][2]],
            start=tokens[i][1],
            end=tokens[i + n - 1][2],
        )
        links.append((mention, best))
        i += n
    return links


def _jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def build_subgraph(linked: set[int], triples: Iterable[Triple]) -> Subgraph:
    """Linked entities plus one-hop neighbors via any triple touching them."""
    nodes = set(linked)
    edges = set()
    for t in triples:
        if t.head in linked or t.tail in linked:
            edges.add(t)
            nodes.add(t.head)
            nodes.add(t.tail)
    return Subgraph(nodes, edges)


def node2vec_transition_weights(
    g: Subgraph, prev: int | None, cur: int, p: float, q: float
) -> dict[int, float]:
    """Second-order walk bias: 1/p back to `prev`, 1 to prev's neighbors, 1/q else.

    With prev None (walk start) every neighbor gets weight 1. Isolated nodes
    yield an empty map.
    """
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    weights: dict[int, float] = {}
    prev_adj = set(g.neighbors(prev)) if prev is not None else set()
    for nxt in g.neighbors(cur):
        if prev is None:
            weights[nxt] = 1.0
        elif nxt == prev:
            weights[nxt] = 1.0 / p
        elif nxt in prev_adj:
            weights[nxt] = 1.0
        else:
            weights[nxt] = 1.0 / q
    return weights


def walk_step(
    g: Subgraph, prev: int | None, cur: int, p: float, q: float, rng: np.random.Generator
) -> int | None:
    """One biased step; None if `cur` is isolated."""
    weights = node2vec_transition_weights(g, prev, cur, p, q)
    if not weights:
        return None
    nodes = list(weights)  # sorted: neighbors() is sorted and dict keeps order
    probs = np.array([weights[n] for n in nodes], dtype=np.float64)
    probs /= probs.sum()
    return nodes[rng.choice(len(nodes), p=probs)]


def generate_walks(
    g: Subgraph,
    walks_per_node: int,
    walk_length: int,
    p: float,
    q: float,
    rng: np.random.Generator,
) -> list[list[int]]:
    walks = []
    order = sorted(g.nodes)
    for _ in range(walks_per_node):
        for start in order:
            walk = [start]
            while len(walk) < walk_length:
                prev = walk[-2] if len(walk) > 1 else None
                nxt = walk_step(g, prev, walk[-1], p, q, rng)
                if nxt is None:
                    break
                walk.append(nxt)
            walks.append(walk)
    return walks


class NodeEmbeddingTable:
    """Immutable entity-id -> vector map of fixed dimension."""

    def __init__(self, vectors: dict[int, np.ndarray]):
        if not vectors:
            raise ValueError("empty embedding table")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent vector shapes: {dims}")
        for node, v in vectors.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite embedding for node {node}")
        self.dim = next(iter(vectors.values())).shape[0]
        self._vectors = {k: v.copy() for k, v in vectors.items()}

    def __contains__(self, node: int) -> bool:
        return node in self._vectors

    def __getitem__(self, node: int) -> np.ndarray:
        if node not in self._vectors:
            raise KeyError(f"node {node} not in embedding table")
        return self._vectors[node].copy()

    def items(self):
        return ((k, v.copy()) for k, v in sorted(self._vectors.items()))


def train_node_embeddings(
    g: Subgraph,
    dim: int = 64,
    walks_per_node: int = 10,
    walk_length: int = 20,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
    p: float = 1.0,
    q: float = 1.0,
    lr: float = 0.025,
) -> NodeEmbeddingTable:
    """Skip-gram with negative sampling over biased walks.

    Deterministic given `seed`; isolated nodes never appear in a context and
    keep their initialization vector.
    """
    if not g.nodes:
        raise ValueError("empty subgraph")
    for name, value in [
        ("dim", dim), ("walks_per_node", walks_per_node), ("walk_length", walk_length),
        ("window", window), ("negatives", negatives), ("epochs", epochs),
    ]:
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")

    order = sorted(g.nodes)
    index = {n: i for i, n in enumerate(order)}
    rng = np.random.default_rng(seed)
    emb_in = (rng.random((len(order), dim)) - 0.5) / dim
    emb_out = np.zeros((len(order), dim))

    walks = generate_walks(g, walks_per_node, walk_length, p, q, rng)
    counts = np.zeros(len(order))
    for walk in walks:
        for node in walk:
            counts[index[node]] += 1
    if counts.sum() == 0:
        return NodeEmbeddingTable({n: emb_in[index[n]] for n in order})
    noise = counts**0.75
    noise /= noise.sum()

    pairs = [
        (index[walk[i]], index[walk[j]])
        for walk in walks
        for i in range(len(walk))
        for j in range(max(0, i - window), min(len(walk), i + window + 1))
        if i != j
    ]
    total = epochs * max(1, len(pairs))
    step = 0
    for _ in range(epochs):
        for center, context in pairs:
            rate = lr * max(1e-4 / lr, 1.0 - step / total)
            step += 1
            targets = np.empty(negatives + 1, dtype=np.int64)
            targets[0] = context
            targets[1:] = rng.choice(len(order), size=negatives, p=noise)
            labels = np.zeros(negatives + 1)
            labels[0] = 1.0
            h = emb_in[center]
            u = emb_out[targets]
            z = 1.0 / (1.0 + np.exp(-(u @ h)))
            gradient = (labels - z) * rate
            grad_h = gradient @ u
            np.add.at(emb_out, targets, np.outer(gradient, h))
            emb_in[center] += grad_h
    return NodeEmbeddingTable({n: emb_in[index[n]] for n in order})


def aggregate_neighbors(
    table: NodeEmbeddingTable,
    g: Subgraph,
    entities: Sequence[int],
    k: int = 3,
    seed: int = 0,
    return_ids: bool = False,
):
    """Mean of each entity's vector with min(k, degree) sampled neighbor vectors.

    Neighbors are sampled uniformly without replacement, seeded; k = 0 or an
    isolated entity reduces to the entity's own vector. With return_ids the
    per-entity id tuples (self first) come back alongside the means, so
    callers can redo the same average over live parameters.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    ids = []
    for ent in entities:
        if ent not in g.nodes:
            raise KeyError(f"entity {ent} not in subgraph")
        vec = table[ent]  # raises KeyError if missing from the table
        nbrs = g.neighbors(ent)
        take = min(k, len(nbrs))
        members = (ent,)
        if take:
            picked = rng.choice(len(nbrs), size=take, replace=False)
            members = (ent, *(nbrs[i] for i in sorted(picked)))
            vec = np.mean([table[m] for m in members], axis=0)
        out.append(vec)
        ids.append(members)
    return (out, ids) if return_ids else out


# ── file formats ─────────────────────────────────────────────────────────

def load_catalog(path: str) -> list[Entity]:
    """TSV rows: id, name, |-separated aliases, prior, description."""
    catalog = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            ent_id, name, aliases, prior, description = parts
            catalog.append(
                Entity(
                    id=int(ent_id),
                    name=name,
                    aliases=frozenset(a for a in aliases.split("|") if a),
                    description=_phrase(description),
                    prior=float(prior),
                )
            )
    return catalog


def save_catalog(catalog: Sequence[Entity], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ent in catalog:
            fh.write(
                f"{ent.id}\t{ent.name}\t{'|'.join(sorted(ent.aliases))}\t"
                f"{ent.prior}\t{' '.join(ent.description)}\n"
            )


def load_triples(path: str) -> list[Triple]:
    """TSV rows: head id, relation, tail id."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            triples.append(Triple(head=int(parts[0]), relation=parts[1], tail=int(parts[2])))
    return triples


def save_triples(triples: Sequence[Triple], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")


def save_embeddings(table: NodeEmbeddingTable, path: str) -> None:
    """TSV rows: id, space-separated vector components (repr precision)."""
    with open(path, "w", encoding="utf-8") as fh:
        for node, vec in table.items():
            fh.write(f"{node}\t{' '.join(repr(x) for x in vec.tolist())}\n")


def load_embeddings(path: str) -> NodeEmbeddingTable:
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            node, values = line.split("\t")
            vectors[int(node)] = np.array([float(x) for x in values.split(" ")])
    return NodeEmbeddingTable(vectors)
