"""A small masked transformer encoder with additive knowledge injection.

Drop-in stand-in for a pretrained masked language model: token + learned
positional embeddings, pre-norm self-attention blocks, and a token-prediction
head. Injection vectors are added to the input embeddings at given positions
before the first block, so gradients w.r.t. injected vectors are exact and
finite-difference checkable. All parameters are float64 and initialized from
an explicit seed; forward passes are deterministic on CPU.

Any module exposing the same ``forward(ids, pad_mask, injections)`` and
``mlm_logits`` signatures (e.g. an adapter over a pretrained model) can stand
in wherever a ToyEncoder is accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .text import PromptedInput


class EncoderError(ValueError):
    pass


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise EncoderError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape

        def heads(proj):
            return proj(x).view(b, t, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = heads(self.wq), heads(self.wk), heads(self.wv)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Pre-norm: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), pad_mask)
        return x + self.ff(self.ln2(x))


class ToyEncoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        d_model: int = 64,
        n_blocks: int = 2,
        n_heads: int = 4,
        max_len: int = 256,
        seed: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_len, d_model)
        self.blocks = nn.ModuleList(Block(d_model, n_heads) for _ in range(n_blocks))
        self.ln_f = nn.LayerNorm(d_model)
        self.mlm_head = nn.Linear(d_model, vocab_size)
        self.double()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if param.dim() >= 2:
                    # positions need a larger scale than weights: the per-level
                    # mask slots must not start out nearly collinear
                    std = 0.1 if name.startswith("pos_emb") else 0.02
                    param.copy_(
                        torch.normal(0.0, std, param.shape, generator=gen, dtype=torch.float64)
                    )
                elif name.endswith("bias"):
                    param.zero_()
                else:  # LayerNorm weight
                    param.fill_(1.0)

    def forward(
        self,
        ids: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        injections: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """ids [B,T] -> hidden states [B,T,d]; pad_mask True at real tokens."""
        b, t = ids.shape
        if t > self.max_len:
            raise EncoderError(f"sequence length {t} exceeds max_len {self.max_len}")
        if pad_mask is None:
            pad_mask = torch.ones(b, t, dtype=torch.bool)
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(t))[None]
        if injections is not None:
            if injections.shape != x.shape:
                raise EncoderError(
                    f"injection shape {tuple(injections.shape)} != {tuple(x.shape)}"
                )
            x = x + injections
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.ln_f(x)

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(hidden)


@dataclass
class EncodedBatch:
    """Final-block hidden states [T, d] paired with their PromptedInput."""

    hidden: torch.Tensor
    prompt: PromptedInput


def _injection_tensor(
    prompt: PromptedInput, injections: dict[int, torch.Tensor] | None, t: int, d: int
) -> torch.Tensor | None:
    if not injections:
        return None
    dense = torch.zeros(t, d, dtype=torch.float64)
    for pos, vec in injections.items():
        if not 0 <= pos < len(prompt.ids):
            raise EncoderError(f"injection position {pos} out of range")
        if vec.shape != (d,):
            raise EncoderError(f"injection width {tuple(vec.shape)} != ({d},)")
        dense[pos] = dense[pos] + vec
    return dense


def encode(
    enc: ToyEncoder,
    prompt: PromptedInput,
    injections: dict[int, torch.Tensor] | None = None,
) -> EncodedBatch:
    """Single-input convenience wrapper over encode_batch."""
    return encode_batch(enc, [prompt], [injections])[0]


def encode_batch(
    enc: ToyEncoder,
    prompts: list[PromptedInput],
    injections: list[dict[int, torch.Tensor] | None] | None = None,
) -> list[EncodedBatch]:
    """Pad to common length, run one forward pass, return per-input views."""
    if injections is None:
        injections = [None] * len(prompts)
    t = max(len(p.ids) for p in prompts)
    ids = torch.zeros((len(prompts), t), dtype=torch.long)  # pad id 0, masked anyway
    pad_mask = torch.zeros(len(prompts), t, dtype=torch.bool)
    dense_rows = []
    any_injection = False
    for i, (prompt, inj) in enumerate(zip(prompts, injections)):
        n = len(prompt.ids)
        ids[i, :n] = torch.tensor(prompt.ids, dtype=torch.long)
        pad_mask[i, :n] = True
        row = _injection_tensor(prompt, inj, t, enc.d_model)
        if row is not None:
            any_injection = True
        dense_rows.append(row)
    dense = None
    if any_injection:
        dense = torch.stack(
            [
                row if row is not None else torch.zeros(t, enc.d_model, dtype=torch.float64)
                for row in dense_rows
            ]
        )
    hidden = enc(ids, pad_mask, dense)
    return [
        EncodedBatch(hidden=hidden[i, : len(p.ids)], prompt=p)
        for i, p in enumerate(prompts)
    ]


def extract_mask_states(batch: EncodedBatch, which: str) -> torch.Tensor:
    """Hidden vectors at the recorded mask slots, level-ordered: [L, d]."""
    positions = {
        "knowledge": batch.prompt.knowledge_mask_pos,
        "positive": batch.prompt.pos_mask_pos,
        "negative": batch.prompt.neg_mask_pos,
    }.get(which)
    if positions is None:
        raise EncoderError(f"unknown mask kind {which!r}")
    if not positions:
        raise EncoderError(f"prompt has no {which} mask positions")
    return batch.hidden[list(positions)]
