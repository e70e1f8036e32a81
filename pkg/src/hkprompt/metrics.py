"""Flattened hierarchical classification metrics.

Gold and predicted label sets follow the ancestor-inclusive convention: a
document labeled with a leaf also carries every ancestor of that leaf.
Constrained variants prune predictions to hierarchy-consistent sets before
scoring. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .taxonomy import Taxonomy, prune_to_consistent


@dataclass
class ConfusionCounts:
    """Per-label true positive / false positive / false negative tallies."""

    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)

    def add(self, gold: set[int], pred: set[int]) -> None:
        for label in gold & pred:
            self.tp[label] = self.tp.get(label, 0) + 1
        for label in pred - gold:
            self.fp[label] = self.fp.get(label, 0) + 1
        for label in gold - pred:
            self.fn[label] = self.fn.get(label, 0) + 1


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def micro_macro_f1(
    gold: Sequence[set[int]],
    pred: Sequence[set[int]],
    all_labels: Iterable[int],
) -> tuple[float, float]:
    """Micro-F1 over pooled counts and unweighted macro over `all_labels`.

    A label scored on no document (tp = fp = fn = 0) contributes 0 to macro.
    """
    if len(gold) != len(pred):
        raise ValueError(f"gold/pred length mismatch: {len(gold)} vs {len(pred)}")
    counts = ConfusionCounts()
    for g, p in zip(gold, pred):
        counts.add(g, p)
    tp_total = sum(counts.tp.values())
    fp_total = sum(counts.fp.values())
    fn_total = sum(counts.fn.values())
    micro = _f1(tp_total, fp_total, fn_total)
    labels = list(all_labels)
    macro = (
        sum(
            _f1(counts.tp.get(x, 0), counts.fp.get(x, 0), counts.fn.get(x, 0))
            for x in labels
        )
        / len(labels)
        if labels
        else 0.0
    )
    return micro, macro


def constrained_f1(
    gold: Sequence[set[int]],
    pred: Sequence[set[int]],
    taxonomy: Taxonomy,
) -> tuple[float, float]:
    """Micro/macro F1 after pruning each prediction set to hierarchy consistency."""
    pruned = [prune_to_consistent(taxonomy, p) for p in pred]
    return micro_macro_f1(gold, pruned, (n.id for n in taxonomy.nodes))


def level_accuracy(
    gold: Sequence[set[int]],
    pred: Sequence[set[int]],
    taxonomy: Taxonomy,
    level: int,
) -> float:
    """Fraction of documents whose gold labels at `level` are all predicted.

    Documents with no gold label at `level` (partial-depth paths) count correct.
    """
    if not 1 <= level <= taxonomy.depth:
        raise ValueError(f"level {level} outside [1, {taxonomy.depth}]")
    at_level = set(taxonomy.level_vocab[level - 1])
    if not gold:
        return 0.0
    hits = sum(1 for g, p in zip(gold, pred) if (g & at_level) <= (p & at_level))
    return hits / len(gold)


def metric_report(
    gold: Sequence[set[int]],
    pred: Sequence[set[int]],
    taxonomy: Taxonomy,
) -> dict:
    """All metrics in the report schema used by the CLI."""
    all_labels = [n.id for n in taxonomy.nodes]
    micro, macro = micro_macro_f1(gold, pred, all_labels)
    c_micro, c_macro = constrained_f1(gold, pred, taxonomy)
    return {
        "micro_f1": micro,
        "macro_f1": macro,
        "c_micro_f1": c_micro,
        "c_macro_f1": c_macro,
        "level_acc": {
            str(level): level_accuracy(gold, pred, taxonomy, level)
            for level in range(1, taxonomy.depth + 1)
        },
    }
