"""Phrase extraction and the embedding cache.

Instructions are chunked into noun/prepositional phrase spans, adjacent
spans merge into referring expressions, and everything is padded to a fixed
width with an explicit mask before embedding. The cache makes repeated
feature extraction free.
"""

import tempfile
from pathlib import Path

from pickrank.backbone import CachedBackbone, EmbeddingCache, HashProjectionBackbone
from pickrank.phrases import extract_phrase_set, merge_adjacent, parse_phrases

INSTRUCTIONS = [
    "Please go to the dining room which has a round table. Pick up the bottle on it.",
    "Find the red circle next to the blue square and bring it to me.",
    "Go.",
]

for text in INSTRUCTIONS:
    print(f"\ninstruction: {text!r}")
    spans = parse_phrases(text)
    print("  raw spans:")
    for span in spans:
        print(f"    {span.kind:6s} [{span.start:2d},{span.end:2d})  {span.text!r}")
    merged = merge_adjacent(spans, text)
    print("  merged phrases:", [p.text for p in merged.phrases] or "(none; whole instruction becomes the phrase)")

    padded = extract_phrase_set(text, n_p_max=8)
    real = [p.text for p, m in zip(padded.phrases, padded.mask) if m]
    print(f"  padded to 8 slots, {sum(padded.mask)} real: {real}")

# --- embedding cache ---
cache_dir = Path(tempfile.mkdtemp(prefix="pickrank-demo-cache-"))
backbone = CachedBackbone(HashProjectionBackbone(), EmbeddingCache(cache_dir))

text = INSTRUCTIONS[0]
v1 = backbone.embed_text(text)
v2 = backbone.embed_text(text)
print(f"\nembedding dim: {v1.shape[0]}; cold call hit the backbone {backbone.text_calls} time(s)")
print(f"warm call served from {cache_dir} (backbone still called {backbone.text_calls} time(s))")
print("bitwise identical:", (v1 == v2).all())
