"""Few-shot hierarchical text classification with knowledge-aware contrastive prompts.

The package trains a small masked transformer encoder pair on cloze-style
prompts: one prompt extracts per-level knowledge representations (backed by
entity linking against a gazetteer and node embeddings of the linked
subgraph), the other extracts a positive/negative context pair per level.
Per-level verbalizer matrices double as classification heads and contrastive
target banks. Training minimizes a four-part joint objective (masked language
modeling, per-level classification, hierarchy-supervised InfoNCE, and a
sibling contrastive term with hard-negative mining).
"""

__version__ = "0.1.0"
