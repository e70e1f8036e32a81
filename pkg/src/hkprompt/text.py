"""Vocabulary, tokenization, and the two cloze prompt templates.

The knowledge prompt carries one mask slot per hierarchy level; the context
prompt carries a positive/negative mask pair per level. Templates are
composed from token strings directly (never re-tokenized), so truncation can
only ever drop document tokens.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PAD, CLS, MASK, UNK, NO_LABEL = "[PAD]", "[CLS]", "[MASK]", "[UNK]", "[NO_LABEL]"
RESERVED = (PAD, CLS, MASK, UNK, NO_LABEL)

ORDINALS = (
    "first", "second", "third", "fourth", "fifth",
    "sixth", "seventh", "eighth", "ninth", "tenth",
)


def ordinal(level: int) -> str:
    if not 1 <= level <= len(ORDINALS):
        raise ValueError(f"no ordinal word for level {level}")
    return ORDINALS[level - 1]


def template_words(depth: int) -> list[str]:
    """Every non-reserved token the two templates can emit up to `depth`."""
    words = {"the", "layers'", "knowledge", "is", "layer", "rather", "than"}
    words.update(ordinal(l) for l in range(1, depth + 1))
    return sorted(words)


class Vocab:
    """Bijective token <-> id map with the reserved tokens always present."""

    def __init__(self, tokens: Sequence[str]):
        missing = [t for t in RESERVED if t not in tokens]
        if missing:
            raise ValueError(f"vocab missing reserved tokens: {missing}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab contains duplicate tokens")
        self._id = {tok: i for i, tok in enumerate(tokens)}
        self._tok = list(tokens)
        self.pad_id = self._id[PAD]
        self.cls_id = self._id[CLS]
        self.mask_id = self._id[MASK]
        self.unk_id = self._id[UNK]
        self.no_label_id = self._id[NO_LABEL]

    def __len__(self) -> int:
        return len(self._tok)

    def __contains__(self, token: str) -> bool:
        return token in self._id

    def id(self, token: str) -> int:
        return self._id.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._tok[idx]

    @classmethod
    def build(cls, texts: Iterable[str], depth: int, extra: Iterable[str] = ()) -> "Vocab":
        """Reserved tokens, template words, then sorted corpus tokens."""
        seen: set[str] = set(template_words(depth)) | set(extra)
        for text in texts:
            seen.update(split_tokens(text))
        seen -= set(RESERVED)
        return cls(list(RESERVED) + sorted(seen))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tok:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def split_tokens(text: str) -> list[str]:
    return [m.group(0).lower() for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str, vocab: Vocab, max_len: int) -> list[int]:
    """Case-folded whitespace/punctuation split; unknowns map to [UNK]."""
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    return [vocab.id(tok) for tok in split_tokens(text)[:max_len]]


@dataclass
class PromptedInput:
    """Token ids plus recorded positions of the template mask slots."""

    ids: list[int]
    knowledge_mask_pos: list[int] = field(default_factory=list)
    pos_mask_pos: list[int] = field(default_factory=list)
    neg_mask_pos: list[int] = field(default_factory=list)
    text_span: tuple[int, int] = (0, 0)
    entity_positions: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        listed = self.knowledge_mask_pos + self.pos_mask_pos + self.neg_mask_pos
        if any(not 0 <= p < n for p in listed + self.entity_positions):
            raise ValueError("mask/entity position out of range")
        if len(set(listed)) != len(listed):
            raise ValueError("mask position lists overlap")

    def with_entity_positions(self, positions: Sequence[int]) -> "PromptedInput":
        return replace(self, entity_positions=sorted(positions))


def _assemble(
    template_ids: list[int],
    doc_tokens: Sequence[int],
    vocab: Vocab,
    max_len: int,
) -> tuple[list[int], tuple[int, int]]:
    if len(template_ids) > max_len:
        raise ValueError(
            f"template length {len(template_ids)} exceeds max_len {max_len}"
        )
    keep = list(doc_tokens)[: max_len - len(template_ids)]
    ids = template_ids + keep
    return ids, (len(template_ids), len(template_ids) + len(keep))


def build_knowledge_prompt(
    doc_tokens: Sequence[int], depth: int, vocab: Vocab, max_len: int = 256
) -> PromptedInput:
    """"[CLS] the <ordinal> layers' knowledge is [MASK]" repeated per level,
    then the document; one knowledge mask slot per level."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    ids = [vocab.cls_id]
    mask_pos = []
    for level in range(1, depth + 1):
        for word in ("the", ordinal(level), "layers'", "knowledge", "is"):
            ids.append(vocab.id(word))
        mask_pos.append(len(ids))
        ids.append(vocab.mask_id)
    ids, span = _assemble(ids, doc_tokens, vocab, max_len)
    return PromptedInput(ids=ids, knowledge_mask_pos=mask_pos, text_span=span)


def build_context_prompt(
    doc_tokens: Sequence[int], depth: int, vocab: Vocab, max_len: int = 256
) -> PromptedInput:
    """"[CLS] the <ordinal> layer is [MASK] rather than [MASK]" per level,
    then the document; positive mask first, negative mask second."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    ids = [vocab.cls_id]
    pos_pos, neg_pos = [], []
    for level in range(1, depth + 1):
        for word in ("the", ordinal(level), "layer", "is"):
            ids.append(vocab.id(word))
        pos_pos.append(len(ids))
        ids.append(vocab.mask_id)
        for word in ("rather", "than"):
            ids.append(vocab.id(word))
        neg_pos.append(len(ids))
        ids.append(vocab.mask_id)
    ids, span = _assemble(ids, doc_tokens, vocab, max_len)
    return PromptedInput(ids=ids, pos_mask_pos=pos_pos, neg_mask_pos=neg_pos, text_span=span)
