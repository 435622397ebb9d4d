"""
Learning to copy
================

Train the 2+2 layer, d=64 preset to reproduce its input sequence and
watch teacher-forced accuracy on held-out sequences.

Run:  python3 demos/copy_task.py
"""
import time

import numpy as np

from edlm.config import preset
from edlm.model import build_model, greedy_decode
from edlm.training import COPY_TAG, TrainOptions, copy_pairs, eval_denoising, train

cfg = preset("copy")
pairs = copy_pairs(cfg, 20_000, 16, seed=1)
held_out = copy_pairs(cfg, 256, 16, seed=2)
print("example:", pairs[0].input, "->", pairs[0].target)

# %%
history = []


def watch(step, model):
    if step % 25 == 0:
        acc = eval_denoising(model, held_out)[COPY_TAG]["accuracy"]
        history.append((step, acc))
        print(f"step {step:4d}  held-out accuracy {acc:.4f}")
        return acc >= 0.99


start = time.perf_counter()
res = train(build_model(cfg, 0), pairs,
            TrainOptions(peak_lr=3e-3, warmup_steps=100, total_steps=2000, batch_size=32), callback=watch)
print(f"stopped after {len(res.metrics)} steps, {time.perf_counter() - start:.1f} s")

# %%
# Greedy generation, not just teacher forcing.
src = held_out[0].input
out = greedy_decode(res.model, src, max_new_tokens=len(src) + 1)
print("input :", src)
print("output:", out)
print("loss at steps 1, 25, 50:", [round(res.metrics[i].loss, 3) for i in (0, 24, 49)])
