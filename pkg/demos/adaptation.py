"""
From a decoder-only checkpoint to an encoder-decoder
====================================================

Both stacks of the encoder-decoder start from the same decoder-only
weights. With no encoder output, the adapted decoder computes exactly what
the source model computed.

Run:  python3 demos/adaptation.py
"""
import tempfile
from pathlib import Path

import numpy as np

from edlm import checkpoint as ck
from edlm.config import preset
from edlm.model import build_decoder_only, decode, decoder_only_logits, encode
from edlm.tensor import zeros

cfg = preset("toy")
src = ck.decoder_only_checkpoint(build_decoder_only(cfg, seed=0), cfg, step=1000)
print(f"source: {src.arch}, {len(src.tensors)} tensors")

# %%
adapted = ck.adapt_from_decoder_only(src, cfg)
print(f"adapted: {adapted.arch}, {len(adapted.tensors)} tensors")
print("embedding tables:", [k for k in adapted.tensors if k.endswith("embedding")])

same = all(adapted.tensors[f"encoder.{k}"].data.tobytes() == v.data.tobytes()
           for k, v in src.tensors.items() if k.startswith("layers."))
print("encoder layers are bitwise copies:", same)

# %%
model = adapted.to_model()
ids = [cfg.bos_id, 3, 14, 15, 9, 2, 6]
before = decoder_only_logits(src.tensors, cfg, ids).data
after = decode(model, zeros((0, cfg.d_model)), ids).data
print(f"max |logit difference| with an empty encoder: {np.max(np.abs(before - after)):.2e}")

H = encode(model, [5, 6, 7, 8])
with_enc = decode(model, H, ids).data
print(f"with a 4-token encoder input the logits move by up to {np.max(np.abs(with_enc - before)):.2f}")

# %%
# Round trip through the file format and average a few copies.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "adapted.edck"
    ck.save(adapted, path)
    print(f"{path.name}: {path.stat().st_size:,} bytes")
    back = ck.load(path)
    avg = ck.average_checkpoints([back] * 3)
    print("average of identical copies is unchanged:", ck.to_bytes(avg) == ck.to_bytes(back))
