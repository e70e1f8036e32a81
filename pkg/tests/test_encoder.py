import torch
import pytest

from hkprompt.encoder import (
    EncoderError,
    ToyEncoder,
    encode,
    encode_batch,
    extract_mask_states,
)
from hkprompt.text import Vocab, build_context_prompt, build_knowledge_prompt


def small_vocab():
    return Vocab.build(texts=["alpha beta gamma delta"], depth=3, extra=["x"])


def small_encoder(vocab, d_model=8, n_blocks=1, n_heads=2, seed=0):
    return ToyEncoder(len(vocab), d_model=d_model, n_blocks=n_blocks, n_heads=n_heads,
                      max_len=64, seed=seed)


def doc(vocab, text="alpha beta gamma"):
    return [vocab.id(t) for t in text.split()]


class TestForward:
    def test_zero_injection_is_identity(self):
        v = small_vocab()
        enc = small_encoder(v)
        p = build_knowledge_prompt(doc(v), 2, v)
        plain = encode(enc, p).hidden
        injected = encode(enc, p, {3: torch.zeros(8, dtype=torch.float64)}).hidden
        assert torch.equal(plain, injected)

    def test_determinism(self):
        v = small_vocab()
        p = build_knowledge_prompt(doc(v), 2, v)
        h1 = encode(small_encoder(v, seed=3), p).hidden
        h2 = encode(small_encoder(v, seed=3), p).hidden
        assert torch.equal(h1, h2)

    def test_injection_width_mismatch(self):
        v = small_vocab()
        enc = small_encoder(v)
        p = build_knowledge_prompt(doc(v), 2, v)
        with pytest.raises(EncoderError):
            encode(enc, p, {3: torch.zeros(5, dtype=torch.float64)})

    def test_zeroed_attention_output_localizes_injection(self):
        # With the attention output projection zeroed, the single block is
        # position-wise, so non-injected positions must be bit-unchanged.
        v = small_vocab()
        enc = small_encoder(v, n_blocks=1)
        with torch.no_grad():
            enc.blocks[0].attn.wo.weight.zero_()
            enc.blocks[0].attn.wo.bias.zero_()
        p = build_knowledge_prompt(doc(v), 2, v)
        target = p.text_span[0]
        plain = encode(enc, p).hidden
        shifted = encode(enc, p, {target: torch.ones(8, dtype=torch.float64)}).hidden
        changed = (plain != shifted).any(dim=1)
        assert changed[target]
        assert not changed[torch.arange(len(p.ids)) != target].any()

    def test_padding_does_not_leak(self):
        # Same prompt encoded alone and padded within a batch must agree.
        v = small_vocab()
        enc = small_encoder(v)
        short = build_knowledge_prompt(doc(v, "alpha"), 2, v)
        long = build_knowledge_prompt(doc(v, "alpha beta gamma delta"), 2, v)
        alone = encode(enc, short).hidden
        batched = encode_batch(enc, [short, long])[0].hidden
        assert torch.allclose(alone, batched, atol=1e-12)

    def test_injection_gradient_matches_finite_differences(self):
        v = small_vocab()
        enc = small_encoder(v, d_model=8, n_blocks=1)
        p = build_knowledge_prompt(doc(v), 2, v)
        probe = torch.randn(len(p.ids), 8, generator=torch.Generator().manual_seed(5),
                            dtype=torch.float64)
        vec = torch.randn(8, generator=torch.Generator().manual_seed(6),
                          dtype=torch.float64).requires_grad_()

        def scalar(x):
            return (encode(enc, p, {3: x}).hidden * probe).sum()

        scalar(vec).backward()
        eps = 1e-6
        for i in range(8):
            bump = torch.zeros(8, dtype=torch.float64)
            bump[i] = eps
            fd = (scalar(vec.detach() + bump) - scalar(vec.detach() - bump)) / (2 * eps)
            rel = abs(fd - vec.grad[i]) / max(abs(fd), abs(vec.grad[i]), 1e-12)
            assert rel < 1e-4


class TestExtract:
    def test_knowledge_count(self):
        v = small_vocab()
        enc = small_encoder(v)
        p = build_knowledge_prompt(doc(v), 2, v)
        states = extract_mask_states(encode(enc, p), "knowledge")
        assert states.shape == (2, 8)

    def test_values_match_recorded_positions(self):
        v = small_vocab()
        enc = small_encoder(v)
        p = build_context_prompt(doc(v), 3, v)
        batch = encode(enc, p)
        pos = extract_mask_states(batch, "positive")
        neg = extract_mask_states(batch, "negative")
        for level in range(3):
            assert torch.equal(pos[level], batch.hidden[p.pos_mask_pos[level]])
            assert torch.equal(neg[level], batch.hidden[p.neg_mask_pos[level]])

    def test_wrong_kind_errors(self):
        v = small_vocab()
        enc = small_encoder(v)
        p = build_knowledge_prompt(doc(v), 2, v)
        with pytest.raises(EncoderError):
            extract_mask_states(encode(enc, p), "positive")


class TestCheckpoint:
    def test_state_dict_roundtrip_exact(self, tmp_path):
        v = small_vocab()
        enc = small_encoder(v, seed=11)
        path = tmp_path / "enc.pt"
        torch.save(enc.state_dict(), str(path))
        other = small_encoder(v, seed=99)
        other.load_state_dict(torch.load(str(path)))
        for a, b in zip(enc.parameters(), other.parameters()):
            assert torch.equal(a, b)
