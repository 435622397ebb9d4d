"""
Mixture-of-denoisers preprocessing
==================================

Corrupt a synthetic corpus with the five standard denoisers, look at a few
examples, and check the empirical corruption statistics.

Run:  python3 demos/ul2_preprocessing.py
"""
import numpy as np

from edlm import ul2
from edlm.config import preset

# The 270m vocabulary reserves 100 sentinels, enough for ~50 spans at L=512.
cfg = preset("270m")
sentinels = cfg.sentinel_ids()
rng = np.random.default_rng(0)

# %%
# One short document through each denoiser.
doc = list(range(20))
for tag, spec in enumerate(ul2.STANDARD_BANK):
    pair = ul2.corrupt_spans(doc, spec, ul2.example_rng(0, tag), sentinels, tag)
    show = lambda ids: " ".join(f"<{ids_ - sentinels[0]}>" if ids_ in sentinels else str(ids_) for ids_ in ids)
    print(f"{spec.name:<10} input : {show(pair.input)}")
    print(f"{'':<10} target: {show(pair.target)}")
    assert ul2.uncorrupt(pair, sentinels) == doc

# %%
# Statistics on 1000 documents of 512 tokens per denoiser.
long_doc = [int(x) for x in rng.integers(0, cfg.first_special, size=512)]
for tag, spec in enumerate(ul2.STANDARD_BANK):
    pairs = [ul2.corrupt_spans(long_doc, spec, ul2.example_rng(1, i), sentinels, tag) for i in range(1000)]
    stats = ul2.corruption_stats(pairs, sentinels)
    print(f"{spec.name:<10} corruption rate {stats.corruption_rate(tag):.4f}   mean span {stats.mean_span(tag):7.2f}")

# %%
# With only 8 sentinels (the toy presets) the span count is capped at 7.
# The corruption rate is kept and spans get longer instead.
few = preset("toy").sentinel_ids()
pairs = [ul2.corrupt_spans(long_doc, ul2.STANDARD_BANK[0], ul2.example_rng(2, i), few, 0) for i in range(1000)]
stats = ul2.corruption_stats(pairs, few)
print(f"8 sentinels: corruption rate {stats.corruption_rate(0):.4f}   mean span {stats.mean_span(0):.2f}")

# %%
# The full pipeline samples a denoiser per example and chunks long documents.
docs = [[int(x) for x in rng.integers(0, cfg.first_special, size=int(rng.integers(50, 900)))]
        for _ in range(2000)]
pairs = ul2.build_examples(docs, sentinels, seed=0, max_len=512)
stats = ul2.corruption_stats(pairs, sentinels)
print(f"{len(pairs)} examples from {len(docs)} documents")
for tag in sorted(stats.counts):
    print(f"  {ul2.tag_name(tag):<10} share {stats.share(tag):.3f}")
