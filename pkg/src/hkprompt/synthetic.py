"""Synthetic corpus generator with controllable sibling confusability.

Every label owns three signature tokens; sibling leaves share one of their
three (the parent's family token), so deepest-level classes are deliberately
confusable. Documents mix the signature tokens of a leaf's whole path with
noise tokens. The matching knowledge graph has one entity per signature
token, with triples tying child-label entities to parent-label entities, and
explanations are simply each label's signature tokens.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .kg import Entity, Triple
from .taxonomy import LabelPath, Taxonomy, load_taxonomy
from .training import Document, sample_k_shot

SIGNATURE_TOKENS_PER_LABEL = 3
REPEATS_PER_LABEL = 2  # how often a path label's signature repeats per document


@dataclass
class SyntheticData:
    corpus: list[Document]
    taxonomy: Taxonomy
    triples: list[Triple]
    catalog: list[Entity]
    explanations: dict[int, list[str]]  # label id -> signature tokens


def generate_synthetic(
    depth: int = 2,
    branching: tuple[int, ...] = (3, 3),
    docs_per_leaf: int = 50,
    vocab_size: int = 200,
    noise_rate: float = 0.2,
    seed: int = 0,
) -> SyntheticData:
    if depth < 2:
        raise ValueError("depth must be >= 2")
    if len(branching) != depth:
        raise ValueError(f"branching must list {depth} factors, got {len(branching)}")
    if any(b < 2 for b in branching):
        raise ValueError("branching factors must be >= 2")
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError("noise_rate must be in [0, 1)")

    # label tree: names sort identically by (level, name) and by construction order
    rows: list[str] = []
    levels: list[list[str]] = []
    parent_of: dict[str, str] = {}
    suffix = {"ROOT": ""}
    current = ["ROOT"]
    for level in range(1, depth + 1):
        nxt = []
        for parent in current:
            for j in range(branching[level - 1]):
                sfx = f"{suffix[parent]}x{j:03d}" if suffix[parent] else f"{j:03d}"
                name = f"c{level}_{sfx}"
                suffix[name] = sfx
                rows.append(f"{name}\t{parent}")
                parent_of[name] = parent
                nxt.append(name)
        levels.append(nxt)
        current = nxt
    taxonomy = load_taxonomy(rows)

    # signature tokens: leaves share their parent's family token
    counter = 0

    def fresh() -> str:
        nonlocal counter
        counter += 1
        return f"sig{counter:04d}"

    signatures: dict[str, list[str]] = {}
    for level, names in enumerate(levels, start=1):
        if level < depth:
            for name in names:
                signatures[name] = [fresh() for _ in range(SIGNATURE_TOKENS_PER_LABEL)]
        else:
            family: dict[str, str] = {}
            for name in names:
                parent = parent_of[name]
                if parent not in family:
                    family[parent] = fresh()
                signatures[name] = [
                    family[parent],
                    *(fresh() for _ in range(SIGNATURE_TOKENS_PER_LABEL - 1)),
                ]

    n_signature = counter
    if n_signature > vocab_size:
        raise ValueError(
            f"vocab_size {vocab_size} too small for {n_signature} signature tokens"
        )
    noise_pool = [f"noise{j:04d}" for j in range(vocab_size - n_signature)]
    if noise_rate > 0 and not noise_pool:
        raise ValueError("vocab_size leaves no room for noise tokens")

    # one entity per signature token; triples follow parent/child label edges
    all_tokens = sorted({tok for sig in signatures.values() for tok in sig})
    entity_id = {tok: i for i, tok in enumerate(all_tokens)}
    owners: dict[str, list[str]] = {tok: [] for tok in all_tokens}
    for name, sig in sorted(signatures.items()):
        for tok in sig:
            owners[tok].append(name)
    catalog = [
        Entity(
            id=entity_id[tok],
            name=tok,
            aliases=frozenset(),
            description=tuple(
                t for owner in owners[tok] for t in signatures[owner] if t != tok
            ),
            prior=0.5,
        )
        for tok in all_tokens
    ]
    triple_set: set[Triple] = set()
    for child, parent in parent_of.items():
        if parent == "ROOT":
            continue
        for ct in signatures[child]:
            for pt in signatures[parent]:
                triple_set.add(Triple(entity_id[ct], "subtopic_of", entity_id[pt]))
    triples = sorted(triple_set, key=lambda t: (t.head, t.relation, t.tail))

    explanations = {
        taxonomy.id_of(name): list(sig) for name, sig in signatures.items()
    }

    # documents
    rng = random.Random(seed)
    corpus: list[Document] = []
    for leaf in levels[-1]:
        path_names = _path_names(leaf, parent_of)
        path_ids = tuple(taxonomy.id_of(n) for n in path_names)
        base = [
            tok
            for name in path_names
            for _ in range(REPEATS_PER_LABEL)
            for tok in signatures[name]
        ]
        for j in range(docs_per_leaf):
            tokens = list(base)
            if noise_rate > 0:
                n_noise = round(len(base) * noise_rate / (1.0 - noise_rate))
                tokens += [rng.choice(noise_pool) for _ in range(n_noise)]
            rng.shuffle(tokens)
            corpus.append(
                Document(
                    id=f"{leaf}_{j:03d}",
                    text=" ".join(tokens),
                    gold_paths=(LabelPath(path_ids),),
                )
            )
    return SyntheticData(corpus, taxonomy, triples, catalog, explanations)


def _path_names(leaf: str, parent_of: dict[str, str]) -> list[str]:
    path = [leaf]
    while parent_of[path[0]] != "ROOT":
        path.insert(0, parent_of[path[0]])
    return path


def split_for_run(
    corpus: list[Document],
    taxonomy: Taxonomy,
    shots: int,
    seed: int,
    dev_fraction: float = 0.25,
) -> tuple[list[Document], list[Document], list[Document]]:
    """k-shot train episode; remaining docs split per leaf into dev and test."""
    episode = sample_k_shot(corpus, taxonomy, shots, seed)
    taken = {d.id for d in episode}
    by_leaf: dict[int, list[Document]] = {}
    for doc in corpus:
        if doc.id in taken:
            continue
        by_leaf.setdefault(doc.gold_paths[0].labels[-1], []).append(doc)
    rng = random.Random(seed + 1)
    dev, test = [], []
    for leaf in sorted(by_leaf):
        pool = sorted(by_leaf[leaf], key=lambda d: d.id)
        rng.shuffle(pool)
        n_dev = max(1, int(len(pool) * dev_fraction)) if pool else 0
        dev.extend(pool[:n_dev])
        test.extend(pool[n_dev:])
    dev.sort(key=lambda d: d.id)
    test.sort(key=lambda d: d.id)
    return episode, dev, test
