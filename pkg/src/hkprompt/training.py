"""K-shot episodes, the joint-objective training loop, and early stopping.

The trainer owns both encoders, the verbalizer, and one Adam optimizer; each
step builds the knowledge and context prompts for a batch, runs the cached
knowledge pipeline, computes the four losses, and applies a single clipped
update. Every random draw is derived from the config seed, so a full run is
bit-reproducible on one machine.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field, replace

import torch

from .encoder import encode_batch, extract_mask_states
from .losses import (
    LossBreakdown,
    LossWeights,
    classification_loss,
    joint_loss,
    kh_infonce,
    mine_hard_negatives,
    sibling_loss,
    verbalizer_logits,
)
from .metrics import metric_report
from .model import KnowledgePipeline, PromptModel, build_injections
from .taxonomy import LabelPath, Taxonomy, decode_predictions, is_valid_path
from .text import build_context_prompt, build_knowledge_prompt, tokenize

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component stops being finite; names the component."""


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    gold_paths: tuple[LabelPath, ...]


@dataclass
class TrainConfig:
    shots: int = 8
    batch_size: int = 8
    learning_rate: float = 4e-5
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    path_mode: str = "single_path"  # or "multi_path"
    sibling_mode: str = "separating"
    mask_rate: float = 0.15
    threshold: float = 0.5
    use_knowledge: bool = True  # False mirrors the knowledge-encoder ablation
    mine_siblings_only: bool = False
    trainable_structural: bool = False  # fine-tune node vectors instead of freezing
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.path_mode not in ("single_path", "multi_path"):
            raise ValueError(f"unknown path_mode {self.path_mode!r}")


@dataclass
class EarlyStopper:
    patience: int
    best_metric: float = float("-inf")
    epochs_since_improve: int = 0


def early_stop_update(s: EarlyStopper, dev_metric: float) -> tuple[EarlyStopper, bool]:
    """Strict improvement resets the counter; stop once it reaches patience."""
    if not math.isfinite(dev_metric):
        raise ValueError("dev metric must be finite")
    if dev_metric > s.best_metric:
        s = replace(s, best_metric=dev_metric, epochs_since_improve=0)
    else:
        s = replace(s, epochs_since_improve=s.epochs_since_improve + 1)
    return s, s.epochs_since_improve >= s.patience


# ── corpus I/O ───────────────────────────────────────────────────────────

def load_corpus(path: str, taxonomy: Taxonomy) -> list[Document]:
    """JSONL rows {"id", "text", "paths": [[label names from root]]}."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            paths = []
            for names in row["paths"]:
                labels = tuple(taxonomy.id_of(n) for n in names)
                if not is_valid_path(taxonomy, labels):
                    raise ValueError(f"{path}:{lineno}: invalid gold path {names}")
                paths.append(LabelPath(labels))
            docs.append(Document(id=str(row["id"]), text=row["text"], gold_paths=tuple(paths)))
    if not docs:
        raise ValueError(f"{path}: empty corpus")
    return docs


def save_corpus(docs: list[Document], taxonomy: Taxonomy, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            row = {
                "id": doc.id,
                "text": doc.text,
                "paths": [[taxonomy.name_of(x) for x in p.labels] for p in doc.gold_paths],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def gold_label_sets(docs: list[Document]) -> list[set[int]]:
    return [{x for p in doc.gold_paths for x in p.labels} for doc in docs]


def sample_k_shot(
    docs: list[Document], taxonomy: Taxonomy, k: int, seed: int
) -> list[Document]:
    """min(k, available) documents per deepest-gold label, deduplicated by id.

    Classes with fewer than k documents contribute everything they have, with
    a warning.
    """
    if not docs:
        raise ValueError("empty corpus")
    by_label: dict[int, list[Document]] = {}
    for doc in docs:
        for p in doc.gold_paths:
            by_label.setdefault(p.labels[-1], []).append(doc)
    rng = random.Random(seed)
    chosen: dict[str, Document] = {}
    for label in sorted(by_label):
        pool = sorted(by_label[label], key=lambda d: d.id)
        if len(pool) < k:
            log.warning(
                "label %s has %d < k=%d documents; taking all",
                taxonomy.name_of(label), len(pool), k,
            )
        for doc in rng.sample(pool, min(k, len(pool))):
            chosen.setdefault(doc.id, doc)
    return sorted(chosen.values(), key=lambda d: d.id)


# ── trainer ──────────────────────────────────────────────────────────────

class Trainer:
    def __init__(
        self,
        model: PromptModel,
        pipeline: KnowledgePipeline | None,
        config: TrainConfig,
    ):
        if model.verbalizer is None:
            raise ValueError("model needs an attached verbalizer before training")
        self.model = model
        self.pipeline = pipeline
        self.config = config
        self.taxonomy = model.taxonomy
        self.vocab = model.vocab
        if (
            config.trainable_structural
            and model.structural_params is None
            and pipeline is not None
            and pipeline.table is not None
        ):
            model.attach_structural_parameters(pipeline.table)
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=config.learning_rate,
            betas=(0.9, 0.999), eps=1e-8,
        )
        self.global_step = 0

    # -- feature building ---------------------------------------------------

    def _doc_tokens(self, doc: Document) -> list[int]:
        return tokenize(doc.text, self.vocab, self.model.config.max_len)

    def _prompts(self, docs: list[Document]):
        depth = self.taxonomy.depth
        know, ctx, injections = [], [], []
        for doc in docs:
            toks = self._doc_tokens(doc)
            kp = build_knowledge_prompt(toks, depth, self.vocab, self.model.config.max_len)
            cp = build_context_prompt(toks, depth, self.vocab, self.model.config.max_len)
            inj = None
            if self.config.use_knowledge and self.pipeline is not None:
                feats = self.pipeline.features(doc.id, doc.text)
                inj = build_injections(
                    self.model, kp.text_span[0], kp.text_span[1], feats,
                    structural_params=self.model.structural_params,
                )
                kp = kp.with_entity_positions(list(inj))
            know.append(kp)
            ctx.append(cp)
            injections.append(inj if inj else None)
        return know, ctx, injections

    def _mask_states(self, docs: list[Document]):
        know, ctx, injections = self._prompts(docs)
        know_enc = encode_batch(self.model.knowledge_encoder, know, injections)
        ctx_enc = encode_batch(self.model.context_encoder, ctx)
        h_k = torch.stack([extract_mask_states(b, "knowledge") for b in know_enc])
        h_p = torch.stack([extract_mask_states(b, "positive") for b in ctx_enc])
        h_n = torch.stack([extract_mask_states(b, "negative") for b in ctx_enc])
        return h_k, h_p, h_n  # each [B, L, d]

    def _fused(self, h_k: torch.Tensor, h_p: torch.Tensor) -> torch.Tensor:
        if self.config.use_knowledge:
            return h_k + h_p
        return h_p

    def _level_logits(self, states: torch.Tensor) -> list[torch.Tensor]:
        return verbalizer_logits(
            self.model.verbalizer, [states[:, level] for level in range(self.taxonomy.depth)]
        )

    def _gold_per_level(self, doc: Document) -> list[list[int]]:
        """Gold label ids per level (possibly several in multi_path mode)."""
        depth = self.taxonomy.depth
        out: list[list[int]] = [[] for _ in range(depth)]
        for p in doc.gold_paths:
            for label in p.labels:
                level = self.taxonomy.node(label).level
                if label not in out[level - 1]:
                    out[level - 1].append(label)
        return [sorted(xs) for xs in out]

    def _hard_negative_sets(
        self, z: list[torch.Tensor], gold_levels: list[list[list[int]]]
    ) -> list[list[list[int]]]:
        """Per sample, per level: top-k non-gold level indices by logit."""
        batch = z[0].shape[0]
        k = self.config.weights.topk_hard
        out: list[list[list[int]]] = [[] for _ in range(batch)]
        for level, logits in enumerate(z):
            vocab_ids = self.taxonomy.level_vocab[level]
            for i in range(batch):
                golds = gold_levels[i][level]
                if not golds:
                    out[i].append([])
                    continue
                gold_idx = {self.taxonomy.level_index(x) for x in golds}
                if self.config.mine_siblings_only:
                    allowed = {
                        self.taxonomy.level_index(s)
                        for g in golds
                        for s in self._sibling_ids(g)
                    } - gold_idx
                else:
                    allowed = set(range(len(vocab_ids))) - gold_idx
                if not allowed:
                    out[i].append([])
                    continue
                if len(gold_idx) == 1:
                    mined = [
                        j for j in mine_hard_negatives(
                            logits[i], next(iter(gold_idx)), len(vocab_ids)
                        )
                        if j in allowed
                    ][:k]
                else:
                    values = logits[i].detach().tolist()
                    mined = sorted(allowed, key=lambda j: (-values[j], j))[:k]
                out[i].append(mined)
        return out

    def _sibling_ids(self, label: int) -> list[int]:
        node = self.taxonomy.node(label)
        return [
            x for x in self.taxonomy.level_vocab[node.level - 1]
            if x != label and self.taxonomy.node(x).parent == node.parent
        ]

    # -- one optimization step ----------------------------------------------

    def train_step(self, batch: list[Document]) -> LossBreakdown:
        if not batch:
            raise ValueError("empty batch")
        cfg = self.config
        depth = self.taxonomy.depth
        h_k, h_p, h_n = self._mask_states(batch)
        fused = self._fused(h_k, h_p)
        z_pos = self._level_logits(fused)
        z_neg = self._level_logits(h_n)

        gold_levels = [self._gold_per_level(doc) for doc in batch]
        hard = self._hard_negative_sets(z_pos, gold_levels)

        # classification (positive route: gold targets; negative route: the
        # mined confusables as targets)
        if cfg.path_mode == "single_path":
            gold_t, neg_t = [], []
            for level in range(depth):
                g_col, n_col = [], []
                for i in range(len(batch)):
                    golds = gold_levels[i][level]
                    g_col.append(self.taxonomy.level_index(golds[0]) if golds else -1)
                    n_col.append(self._top_sibling_index(z_pos[level][i], golds))
                gold_t.append(torch.tensor(g_col, dtype=torch.long))
                neg_t.append(torch.tensor(n_col, dtype=torch.long))
            cls = classification_loss(z_pos, gold_t, "ce", neg_logits=z_neg, neg_targets=neg_t)
        else:
            gold_t, neg_t = [], []
            for level in range(depth):
                size = len(self.taxonomy.level_vocab[level])
                g_mat = torch.zeros(len(batch), size, dtype=torch.float64)
                n_mat = torch.zeros(len(batch), size, dtype=torch.float64)
                for i in range(len(batch)):
                    for x in gold_levels[i][level]:
                        g_mat[i, self.taxonomy.level_index(x)] = 1.0
                    for j in hard[i][level]:
                        n_mat[i, j] = 1.0
                gold_t.append(g_mat)
                neg_t.append(n_mat)
            valid = [
                torch.tensor(
                    [bool(gold_levels[i][level]) for i in range(len(batch))]
                )
                for level in range(depth)
            ]
            cls = classification_loss(
                z_pos, gold_t, "bce", neg_logits=z_neg, neg_targets=neg_t, valid=valid
            )

        # hierarchy-supervised InfoNCE over knowledge mask states
        contrast_labels = torch.tensor(
            [
                [min(gold_levels[i][level]) if gold_levels[i][level] else -1
                 for level in range(depth)]
                for i in range(len(batch))
            ],
            dtype=torch.long,
        )
        kh = (
            kh_infonce(h_k, contrast_labels, cfg.weights)
            if len(batch) >= 2
            else torch.zeros((), dtype=torch.float64)
        )

        # sibling contrastive term, averaged over the batch
        sib_terms = []
        for i in range(len(batch)):
            gold_idx = [
                self.taxonomy.level_index(gold_levels[i][level][0])
                if gold_levels[i][level] else None
                for level in range(depth)
            ]
            sib_terms.append(
                sibling_loss(
                    h_p[i], h_n[i], self.model.verbalizer, gold_idx, hard[i],
                    cfg.weights, mode=cfg.sibling_mode,
                )
            )
        sib = torch.stack(sib_terms).mean()

        # masked language modeling on the raw documents (one fused forward;
        # same per-document masks and targets as mlm_mask_and_loss)
        mlm = self._batched_mlm(batch)

        breakdown = joint_loss(mlm, cls, kh, sib, cfg.weights)
        for name, value in (
            ("mlm", breakdown.mlm), ("classification", breakdown.classification),
            ("kh_infonce", breakdown.kh_infonce), ("sibling", breakdown.sibling),
        ):
            if not torch.isfinite(value):
                raise NonFiniteLossError(f"non-finite {name} loss; step aborted")

        self.optimizer.zero_grad()
        breakdown.joint.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.clip_norm)
        self.optimizer.step()
        self.global_step += 1
        return breakdown.as_floats()

    def _batched_mlm(self, batch: list[Document]) -> torch.Tensor:
        """Mean over documents of the per-document masked-token CE."""
        from .losses import sample_mlm_mask
        from .text import PromptedInput

        cfg = self.config
        enc = self.model.context_encoder
        prompts, spans = [], []
        for i, doc in enumerate(batch):
            tokens = self._doc_tokens(doc)[: enc.max_len - 1]
            seed = (cfg.seed * 1_000_003 + self.global_step * 8191 + i) % (2**31)
            mask = sample_mlm_mask(len(tokens), cfg.mask_rate, seed) if tokens else []
            masked = [self.vocab.mask_id if m else tok for tok, m in zip(tokens, mask)]
            positions = [j + 1 for j, m in enumerate(mask) if m]
            prompts.append(PromptedInput(ids=[self.vocab.cls_id] + masked))
            spans.append((positions, [tokens[p - 1] for p in positions]))
        encoded = encode_batch(enc, prompts)
        per_doc = []
        for enc_out, (positions, targets) in zip(encoded, spans):
            if not positions:
                per_doc.append(torch.zeros((), dtype=torch.float64))
                continue
            logits = enc.mlm_logits(enc_out.hidden[positions])
            per_doc.append(
                torch.nn.functional.cross_entropy(
                    logits, torch.tensor(targets, dtype=torch.long), reduction="mean"
                )
            )
        return torch.stack(per_doc).mean()

    def _top_sibling_index(self, logits: torch.Tensor, golds: list[int]) -> int:
        """Level index of the highest-scoring sibling of the gold, or -1."""
        if not golds:
            return -1
        sibs = self._sibling_ids(golds[0])
        if not sibs:
            return -1
        values = logits.detach().tolist()
        idx = [self.taxonomy.level_index(s) for s in sibs]
        return min(idx, key=lambda j: (-values[j], j))

    # -- inference and the loop ----------------------------------------------

    @torch.no_grad()
    def predict(self, docs: list[Document], chunk: int = 16) -> list[set[int]]:
        preds = []
        for start in range(0, len(docs), chunk):
            part = docs[start : start + chunk]
            h_k, h_p, _ = self._mask_states(part)
            z = self._level_logits(self._fused(h_k, h_p))
            for i in range(len(part)):
                logits = [z[level][i].tolist() for level in range(self.taxonomy.depth)]
                preds.append(
                    decode_predictions(
                        self.taxonomy, logits, self.config.path_mode, self.config.threshold
                    )
                )
        return preds

    def evaluate(self, docs: list[Document]) -> dict:
        return metric_report(gold_label_sets(docs), self.predict(docs), self.taxonomy)

    def fit(self, train_docs: list[Document], dev_docs: list[Document]) -> dict:
        """Run epochs with early stopping on dev macro-F1; restore best state.

        Returns history: per-epoch mean losses and dev metrics.
        """
        cfg = self.config
        stopper = EarlyStopper(patience=cfg.patience)
        best_state = copy.deepcopy(self.model.state_dict())
        history: list[dict] = []
        order = list(range(len(train_docs)))
        for epoch in range(cfg.max_epochs):
            rng = random.Random(cfg.seed * 100_003 + epoch)
            rng.shuffle(order)
            sums = dict.fromkeys(("mlm", "classification", "kh_infonce", "sibling", "joint"), 0.0)
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_docs[i] for i in order[start : start + cfg.batch_size]]
                breakdown = self.train_step(batch)
                for key in sums:
                    sums[key] += getattr(breakdown, key)
                n_batches += 1
            dev = self.evaluate(dev_docs)
            history.append(
                {
                    "epoch": epoch,
                    "loss": {k: v / max(1, n_batches) for k, v in sums.items()},
                    "dev": dev,
                }
            )
            improved = dev["macro_f1"] > stopper.best_metric
            stopper, stop = early_stop_update(stopper, dev["macro_f1"])
            if improved:
                best_state = copy.deepcopy(self.model.state_dict())
            if stop:
                break
        self.model.load_state_dict(best_state)
        return {"epochs": history, "best_dev_macro_f1": stopper.best_metric}
