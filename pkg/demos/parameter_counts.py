"""
Where the parameters go
=======================

Count parameters for the built-in presets and measure what merged
attention and tied embeddings save on a 2B-sized configuration.

Run:  python3 demos/parameter_counts.py
"""
from edlm.config import PRESETS, preset
from edlm.model import count_params

# %%
print(f"{'preset':<12} {'embedding':>14} {'encoder':>14} {'decoder':>14} {'total':>14}")
for name in PRESETS:
    c = count_params(preset(name))
    print(f"{name:<12} {c['embedding']:>14,} {c['encoder']:>14,} {c['decoder']:>14,} {c['total']:>14,}")

# %%
# Savings are measured on text parameters, so the vision projection is left out.


def text_total(**kw):
    c = count_params(preset("2b-ablation", **kw))
    return c["total"] - c["vision_projection"]


base = text_total(tied_embeddings=False, merged_attention=False)
for label, kw in [("merged attention", dict(tied_embeddings=False, merged_attention=True)),
                  ("tied embeddings", dict(tied_embeddings=True, merged_attention=False)),
                  ("both", dict(tied_embeddings=True, merged_attention=True))]:
    total = text_total(**kw)
    print(f"{label:<17} {base / 1e6:8.1f}M -> {total / 1e6:8.1f}M  saves {100 * (base - total) / base:5.2f}%")
