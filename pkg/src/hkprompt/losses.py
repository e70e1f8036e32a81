"""Verbalizer heads and the four training objectives.

All losses are differentiable torch scalars in float64. Cosine similarity is
used throughout, guarded to return 0 for zero-norm operands. The hierarchy
InfoNCE term is supervised by per-level labels within a batch; the sibling
term contrasts the positive context mask against verbalizer rows of
hard-mined negative labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ToyEncoder, encode_batch
from .taxonomy import Taxonomy
from .text import PromptedInput, Vocab, split_tokens

log = logging.getLogger(__name__)

SIBLING_CLAMP = 1e-12  # floor for the sum inside the sibling-loss log


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.2
    tau: float = 1.0
    lambda_per_level: list[float] | None = None  # None: uniform 1/L
    topk_hard: int = 3

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.topk_hard < 1:
            raise ValueError(f"topk_hard must be >= 1, got {self.topk_hard}")
        if self.lambda_per_level is not None and any(x < 0 for x in self.lambda_per_level):
            raise ValueError("lambda_per_level entries must be >= 0")

    def level_coeffs(self, depth: int) -> list[float]:
        if self.lambda_per_level is None:
            return [1.0 / depth] * depth
        if len(self.lambda_per_level) != depth:
            raise ValueError(
                f"lambda_per_level has {len(self.lambda_per_level)} entries for depth {depth}"
            )
        return list(self.lambda_per_level)


@dataclass
class LossBreakdown:
    mlm: torch.Tensor | float
    classification: torch.Tensor | float
    kh_infonce: torch.Tensor | float
    sibling: torch.Tensor | float
    joint: torch.Tensor | float

    def as_floats(self) -> "LossBreakdown":
        def f(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return LossBreakdown(
            f(self.mlm), f(self.classification), f(self.kh_infonce),
            f(self.sibling), f(self.joint),
        )


def joint_loss(
    mlm, classification, kh_infonce, sibling, weights: LossWeights
) -> LossBreakdown:
    """Weighted composition; joint = mlm + cls + alpha*kh + beta*sibling exactly."""
    joint = mlm + classification + weights.alpha * kh_infonce + weights.beta * sibling
    return LossBreakdown(mlm, classification, kh_infonce, sibling, joint)


# ── similarity ───────────────────────────────────────────────────────────

def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dim; 0 (with a warning) on zero norms."""
    dot = (a * b).sum(-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    safe = denom > 0
    if not bool(safe.all()):
        log.warning("zero-norm vector in cosine similarity; treating similarity as 0")
    denom = torch.where(safe, denom, torch.ones_like(denom))
    return torch.where(safe, dot / denom, torch.zeros_like(dot))


# ── hierarchy-supervised InfoNCE ─────────────────────────────────────────

def kh_infonce_layer(
    anchor: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """-log(pos mass / total mass) over temperature-scaled cosine similarities.

    Computed as logsumexp(all) - logsumexp(pos), so an empty negative set gives
    exactly 0 and the value is never negative.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if positives.numel() == 0:
        raise ValueError("positives must be non-empty; callers skip such anchors")
    sim_pos = cosine(anchor.unsqueeze(0), positives) / tau
    if negatives.numel() == 0:
        return torch.zeros((), dtype=anchor.dtype)
    sim_neg = cosine(anchor.unsqueeze(0), negatives) / tau
    all_sims = torch.cat([sim_pos, sim_neg])
    return torch.logsumexp(all_sims, dim=0) - torch.logsumexp(sim_pos, dim=0)


def kh_infonce(
    anchors: torch.Tensor,
    labels: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Layer-weighted sum of in-batch supervised InfoNCE.

    anchors: [B, L, d] per-sample per-level representations. labels: [B, L]
    label ids, -1 marking levels a sample has no gold at. Per level, an
    anchor's positives are other batch members sharing its label; anchors
    without positives contribute nothing.
    """
    b, depth, _ = anchors.shape
    if b < 2:
        raise ValueError("batch must contain at least 2 samples")
    if labels.shape != (b, depth):
        raise ValueError(f"labels shape {tuple(labels.shape)} != ({b}, {depth})")
    coeffs = weights.level_coeffs(depth)
    total = torch.zeros((), dtype=anchors.dtype)
    not_self = ~torch.eye(b, dtype=torch.bool)
    for level in range(depth):
        if coeffs[level] == 0.0:
            continue
        h = anchors[:, level]
        y = labels[:, level]
        valid = y >= 0
        pair_valid = valid[:, None] & valid[None, :] & not_self
        same = (y[:, None] == y[None, :]) & pair_valid
        has_pos = same.any(dim=1)
        if not bool(has_pos.any()):
            continue
        sims = cosine(h[:, None, :], h[None, :, :]) / weights.tau
        sims_sel = sims[has_pos]
        lse_all = torch.logsumexp(
            sims_sel.masked_fill(~pair_valid[has_pos], float("-inf")), dim=1
        )
        lse_pos = torch.logsumexp(
            sims_sel.masked_fill(~same[has_pos], float("-inf")), dim=1
        )
        total = total + coeffs[level] * (lse_all - lse_pos).mean()
    return total


# ── verbalizer ───────────────────────────────────────────────────────────

class Verbalizer(nn.Module):
    """Per-level label-embedding matrices; rows double as class weights and
    contrastive targets."""

    def __init__(self, matrices: list[torch.Tensor], use_bias: bool = False):
        super().__init__()
        self.weights = nn.ParameterList(
            nn.Parameter(m.to(torch.float64).clone()) for m in matrices
        )
        self.biases = (
            nn.ParameterList(
                nn.Parameter(torch.zeros(m.shape[0], dtype=torch.float64)) for m in matrices
            )
            if use_bias
            else None
        )

    @property
    def depth(self) -> int:
        return len(self.weights)

    def level_size(self, level: int) -> int:
        return self.weights[level].shape[0]

    def logits(self, level: int, h: torch.Tensor) -> torch.Tensor:
        w = self.weights[level]
        if h.shape[-1] != w.shape[1]:
            raise ValueError(f"hidden width {h.shape[-1]} != verbalizer width {w.shape[1]}")
        z = h @ w.T
        if self.biases is not None:
            z = z + self.biases[level]
        return z


def verbalizer_logits(v: Verbalizer, fused: list[torch.Tensor]) -> list[torch.Tensor]:
    """Per-level logits from per-level fused representations."""
    if len(fused) != v.depth:
        raise ValueError(f"expected {v.depth} level vectors, got {len(fused)}")
    return [v.logits(level, h) for level, h in enumerate(fused)]


def init_verbalizer(
    explanations: dict[int, list[str]],
    enc: ToyEncoder,
    vocab: Vocab,
    taxonomy: Taxonomy,
    use_bias: bool = False,
) -> Verbalizer:
    """Rows = encoder state at the [CLS] slot over "[CLS] <explanation>".

    `explanations` maps label id to explanation tokens; a missing entry falls
    back to the label's own name tokens.
    """
    matrices = []
    for vocab_ids in taxonomy.level_vocab:
        prompts = []
        for label in vocab_ids:
            tokens = explanations.get(label) or split_tokens(taxonomy.name_of(label))
            if not tokens:
                raise ValueError(f"label {taxonomy.name_of(label)!r} has no explanation")
            ids = [vocab.cls_id] + [vocab.id(t) for t in tokens][: enc.max_len - 1]
            prompts.append(PromptedInput(ids=ids))
        encoded = encode_batch(enc, prompts)
        matrices.append(torch.stack([e.hidden[0] for e in encoded]).detach())
    return Verbalizer(matrices, use_bias=use_bias)


def load_explanations(path: str, taxonomy: Taxonomy) -> dict[int, list[str]]:
    """TSV rows: label_name, explanation text; tokens are case-folded."""
    out: dict[int, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>explanation'")
            out[taxonomy.id_of(parts[0])] = split_tokens(parts[1])
    return out


# ── hard negatives and sibling loss ──────────────────────────────────────

def mine_hard_negatives(logits: torch.Tensor, gold: int, k: int) -> list[int]:
    """Indices of the k largest logits excluding gold; ties to the smaller index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = logits.shape[0]
    if not 0 <= gold < n:
        raise ValueError(f"gold index {gold} outside level vocab of size {n}")
    values = logits.detach().tolist()
    order = sorted((i for i in range(n) if i != gold), key=lambda i: (-values[i], i))
    return order[:k]


def sibling_loss(
    h_p: torch.Tensor,
    h_n: torch.Tensor,
    v: Verbalizer,
    gold: list[int | None],
    hard_negatives: list[list[int]],
    weights: LossWeights,
    mode: str = "separating",
) -> torch.Tensor:
    """Contrast the positive mask state against the negative mask state and
    hard-negative verbalizer rows.

    Per active level the term is s(h_p, h_n)/tau (negated in the default
    separating mode, which pushes the pair apart) plus the softmax ratio of
    the gold row against hard-negative rows. The level sum is clamped at
    SIBLING_CLAMP before the log; the result is -log(sum)/n_active_levels.
    """
    if mode not in ("literal", "separating"):
        raise ValueError(f"unknown sibling loss mode {mode!r}")
    depth = v.depth
    if h_p.shape[0] != depth or h_n.shape[0] != depth:
        raise ValueError("h_p/h_n must provide one vector per level")
    terms = []
    for level in range(depth):
        g = gold[level]
        if g is None:
            continue
        pair = cosine(h_p[level], h_n[level]) / weights.tau
        if mode == "separating":
            pair = -pair
        rows = v.weights[level]
        sim_gold = cosine(h_p[level], rows[g]) / weights.tau
        negs = hard_negatives[level]
        if negs:
            sim_negs = cosine(h_p[level].unsqueeze(0), rows[list(negs)]) / weights.tau
            ratio = torch.exp(
                sim_gold - torch.logsumexp(torch.cat([sim_gold.view(1), sim_negs]), dim=0)
            )
        else:
            ratio = torch.ones((), dtype=h_p.dtype)
        terms.append(pair + ratio)
    if not terms:
        return torch.zeros((), dtype=h_p.dtype)
    inner = torch.stack(terms).sum()
    if float(inner.detach()) < SIBLING_CLAMP:
        # the sum inside the log can go non-positive; the clamp keeps it
        # finite (zero gradient inside the clamped region)
        if mode == "literal":
            log.warning(
                "sibling loss inner sum %.3g clamped to %.0e",
                float(inner.detach()), SIBLING_CLAMP,
            )
        else:
            log.debug("sibling loss inner sum clamped")
    return -torch.log(torch.clamp(inner, min=SIBLING_CLAMP)) / len(terms)


# ── classification ───────────────────────────────────────────────────────

def classification_loss(
    z: list[torch.Tensor],
    gold: list[torch.Tensor],
    mode: str,
    neg_logits: list[torch.Tensor] | None = None,
    neg_targets: list[torch.Tensor] | None = None,
    valid: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Per-level classification summed over levels, averaged over the batch.

    mode "ce": z[l] is [B, V_l], gold[l] is [B] class indices. mode "bce":
    gold[l] is a [B, V_l] multi-hot target and every label contributes a
    binary term. When given, neg_logits/neg_targets train the negative-route
    logits with the mined negative labels as their positive targets, under
    the same form. valid[l] ([B] bool) excludes samples missing that level.
    """
    if mode not in ("ce", "bce"):
        raise ValueError(f"unknown classification mode {mode!r}")
    if neg_logits is not None or neg_targets is not None:
        if neg_logits is None or neg_targets is None:
            raise ValueError("neg_logits and neg_targets must be given together")

    def route(logits_list, target_list):
        batch = logits_list[0].shape[0]
        per_sample = torch.zeros(batch, dtype=torch.float64)
        for level, (logits, target) in enumerate(zip(logits_list, target_list)):
            if mode == "ce":
                term = F.cross_entropy(logits, target.clamp(min=0), reduction="none")
                mask = target >= 0
            else:
                term = F.binary_cross_entropy_with_logits(
                    logits, target, reduction="none"
                ).sum(dim=1)
                mask = torch.ones(batch, dtype=torch.bool)
            if valid is not None:
                mask = mask & valid[level]
            per_sample = per_sample + term * mask.to(term.dtype)
        return per_sample.mean()

    total = route(z, gold)
    if neg_logits is not None:
        total = total + route(neg_logits, neg_targets)
    return total


# ── masked language modeling ─────────────────────────────────────────────

def sample_mlm_mask(
    n_tokens: int, mask_rate: float, seed: int
) -> np.ndarray:
    """Independent Bernoulli(mask_rate) mask over token positions."""
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0,1), got {mask_rate}")
    rng = np.random.default_rng(seed)
    return rng.random(n_tokens) < mask_rate


def mlm_mask_and_loss(
    doc_ids: list[int],
    enc: ToyEncoder,
    vocab: Vocab,
    mask_rate: float = 0.15,
    seed: int = 0,
) -> torch.Tensor:
    """Mask document tokens at `mask_rate`, predict originals, mean CE.

    The sequence is "[CLS] <doc>"; only document positions are maskable.
    Returns exactly 0 when the draw masks nothing.
    """
    if not doc_ids:
        return torch.zeros((), dtype=torch.float64)
    mask = sample_mlm_mask(len(doc_ids), mask_rate, seed)
    if not mask.any():
        return torch.zeros((), dtype=torch.float64)
    masked = [vocab.mask_id if m else tok for tok, m in zip(doc_ids, mask)]
    prompt = PromptedInput(ids=[vocab.cls_id] + masked[: enc.max_len - 1])
    hidden = encode_batch(enc, [prompt])[0].hidden
    positions = [i + 1 for i, m in enumerate(mask[: enc.max_len - 1]) if m]
    targets = torch.tensor(
        [doc_ids[i - 1] for i in positions], dtype=torch.long
    )
    logits = enc.mlm_logits(hidden[positions])
    return F.cross_entropy(logits, targets, reduction="mean")
