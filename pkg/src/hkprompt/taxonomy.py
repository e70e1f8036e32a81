"""Label hierarchy: a rooted label tree with per-level vocabularies.

Labels form a forest under one virtual root ("ROOT" in taxonomy files); the
virtual root itself is not a node, so level-1 labels are mutual siblings.
Label ids are assigned by (level, name) so that vocabulary row indices are
reproducible across runs regardless of file row order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

ROOT_NAME = "ROOT"


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy input or unknown labels."""


@dataclass(frozen=True)
class LabelNode:
    id: int
    name: str
    level: int
    parent: int | None  # None only for level-1 labels


@dataclass(frozen=True)
class LabelPath:
    """Ordered label ids from level 1 downward; consecutive entries are parent/child."""

    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.labels)


class Taxonomy:
    """Immutable after construction; safe for concurrent reads."""

    def __init__(self, nodes: list[LabelNode]):
        self.nodes = nodes
        self.depth = max(n.level for n in nodes)
        self._by_id = {n.id: n for n in nodes}
        self._by_name = {n.name: n for n in nodes}
        self.level_vocab: list[list[int]] = [[] for _ in range(self.depth)]
        for n in nodes:  # nodes are in id order == (level, name) order
            self.level_vocab[n.level - 1].append(n.id)
        self._children: dict[int, list[int]] = {n.id: [] for n in nodes}
        for n in nodes:
            if n.parent is not None:
                self._children[n.parent].append(n.id)
        self._level_index = {
            label: i for vocab in self.level_vocab for i, label in enumerate(vocab)
        }

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, label: int) -> LabelNode:
        try:
            return self._by_id[label]
        except KeyError:
            raise TaxonomyError(f"unknown label id {label}") from None

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name].id
        except KeyError:
            raise TaxonomyError(f"unknown label name {name!r}") from None

    def name_of(self, label: int) -> str:
        return self.node(label).name

    def children(self, label: int) -> list[int]:
        self.node(label)
        return list(self._children[label])

    def level_index(self, label: int) -> int:
        """Position of `label` within its level's vocabulary."""
        self.node(label)
        return self._level_index[label]

    def label_at(self, level: int, index: int) -> int:
        return self.level_vocab[level - 1][index]


def load_taxonomy(rows: Iterable[str]) -> Taxonomy:
    """Build a Taxonomy from "child<TAB>parent" rows; parent "ROOT" marks level 1.

    Raises TaxonomyError on cycles, orphan children (parent neither ROOT nor
    defined as a child elsewhere), or a duplicate child name under one parent.
    """
    parent_of: dict[str, str] = {}
    for lineno, raw in enumerate(rows, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaxonomyError(f"line {lineno}: expected 'child<TAB>parent', got {line!r}")
        child, parent = parts[0].strip(), parts[1].strip()
        if not child or not parent:
            raise TaxonomyError(f"line {lineno}: empty label name")
        if child == ROOT_NAME:
            raise TaxonomyError(f"line {lineno}: {ROOT_NAME!r} cannot appear as a child")
        if child in parent_of:
            if parent_of[child] == parent:
                raise TaxonomyError(f"duplicate child {child!r} under parent {parent!r}")
            raise TaxonomyError(f"label {child!r} has multiple parents")
        parent_of[child] = parent

    if not parent_of:
        raise TaxonomyError("taxonomy has no edges")

    for child, parent in parent_of.items():
        if parent != ROOT_NAME and parent not in parent_of:
            raise TaxonomyError(f"orphan child {child!r}: parent {parent!r} is not defined")

    levels: dict[str, int] = {}

    def level_of(name: str) -> int:
        if name in levels:
            return levels[name]
        chain = []
        cur = name
        while cur != ROOT_NAME and cur not in levels:
            chain.append(cur)
            if len(chain) > len(parent_of):
                raise TaxonomyError(f"cycle detected involving {name!r}")
            cur = parent_of[cur]
        base = 0 if cur == ROOT_NAME else levels[cur]
        for i, member in enumerate(reversed(chain), start=1):
            levels[member] = base + i
        return levels[name]

    for name in parent_of:
        level_of(name)

    ordered = sorted(parent_of, key=lambda n: (levels[n], n))
    ids = {name: i for i, name in enumerate(ordered)}
    nodes = [
        LabelNode(
            id=ids[name],
            name=name,
            level=levels[name],
            parent=None if parent_of[name] == ROOT_NAME else ids[parent_of[name]],
        )
        for name in ordered
    ]
    return Taxonomy(nodes)


def load_taxonomy_file(path: str) -> Taxonomy:
    with open(path, encoding="utf-8") as fh:
        return load_taxonomy(fh)


def siblings(t: Taxonomy, label: int) -> list[int]:
    """Labels sharing `label`'s parent (virtual root for level 1), in vocab order."""
    node = t.node(label)
    vocab = t.level_vocab[node.level - 1]
    return [x for x in vocab if x != label and t.node(x).parent == node.parent]


def ancestors(t: Taxonomy, label: int) -> list[int]:
    """Ancestor chain from level 1 down to `label`'s parent; empty at level 1."""
    chain: list[int] = []
    cur = t.node(label).parent
    while cur is not None:
        chain.append(cur)
        cur = t.node(cur).parent
    chain.reverse()
    return chain


def path_to(t: Taxonomy, label: int) -> LabelPath:
    return LabelPath(tuple(ancestors(t, label) + [label]))


def is_valid_path(t: Taxonomy, labels: Sequence[int]) -> bool:
    if not labels:
        return False
    if t.node(labels[0]).level != 1:
        return False
    return all(t.node(b).parent == a for a, b in zip(labels, labels[1:]))


def prune_to_consistent(t: Taxonomy, predicted: set[int]) -> set[int]:
    """Largest subset where every retained label has all ancestors retained.

    Computed top-down: a label survives iff it is level 1 or its parent survived.
    Idempotent by construction.
    """
    kept: set[int] = set()
    for vocab in t.level_vocab:
        for label in vocab:
            if label in predicted:
                parent = t.node(label).parent
                if parent is None or parent in kept:
                    kept.add(label)
    return kept


def decode_predictions(
    t: Taxonomy,
    logits_per_level: Sequence[Sequence[float]],
    mode: str = "single_path",
    threshold: float = 0.5,
) -> set[int]:
    """Turn per-level logits into a hierarchy-consistent label set.

    single_path: greedy top-down argmax restricted to children of the previous
    pick; truncates silently if the pick has no children before the bottom
    level. multi_path: sigmoid >= threshold per label, then prune to a
    consistent set.
    """
    if len(logits_per_level) != t.depth:
        raise TaxonomyError(
            f"expected logits for {t.depth} levels, got {len(logits_per_level)}"
        )
    for level, logits in enumerate(logits_per_level, start=1):
        if len(logits) != len(t.level_vocab[level - 1]):
            raise TaxonomyError(
                f"level {level}: expected {len(t.level_vocab[level - 1])} logits, "
                f"got {len(logits)}"
            )

    if mode == "single_path":
        picked: list[int] = []
        candidates = list(t.level_vocab[0])
        for logits in logits_per_level:
            if not candidates:
                break  # partial path: previous pick had no children
            best = max(candidates, key=lambda lab: (logits[t.level_index(lab)], -lab))
            picked.append(best)
            candidates = t.children(best)
        return set(picked)

    if mode == "multi_path":
        raw = {
            label
            for level, logits in enumerate(logits_per_level, start=1)
            for label in t.level_vocab[level - 1]
            if 1.0 / (1.0 + math.exp(-logits[t.level_index(label)])) >= threshold
        }
        return prune_to_consistent(t, raw)

    raise TaxonomyError(f"unknown decode mode {mode!r}")
