"""Random instances shared by several test modules."""
import numpy as np

from edlm.attention import GLOBAL, AttentionWeights, LayerKind
from edlm.tensor import tensor


def random_attention(rng, d, dh, hq, hkv):
    """Raw arrays and the matching AttentionWeights."""
    raw = {
        "wq": rng.standard_normal((d, hq * dh)) / np.sqrt(d),
        "wk": rng.standard_normal((d, hkv * dh)) / np.sqrt(d),
        "wv": rng.standard_normal((d, hkv * dh)) / np.sqrt(d),
        "wo": rng.standard_normal((hq * dh, d)) / np.sqrt(hq * dh),
        "q_gain": 1.0 + 0.3 * rng.standard_normal(dh),
        "k_gain": 1.0 + 0.3 * rng.standard_normal(dh),
    }
    w = AttentionWeights(*(tensor(raw[k]) for k in ("wq", "wk", "wv", "wo", "q_gain", "k_gain")),
                         n_q_heads=hq, n_kv_heads=hkv)
    return raw, w


def random_instance(rng):
    """One small merged-attention problem: m, n <= 8, heads <= 4."""
    hkv = int(rng.integers(1, 5))
    hq = hkv * int(rng.choice([g for g in (1, 2, 4) if hkv * g <= 4]))
    dh = int(rng.choice([2, 4, 6]))
    d = int(rng.integers(2, 9))
    m = int(rng.integers(1, 9))
    n = int(rng.integers(0, 9))
    window = None if rng.random() < 0.4 else int(rng.integers(1, 6))
    base = float(rng.choice([1e4, 1e6]))
    pi_scale = float(rng.choice([1.0, 2.0, 4.0]))
    raw, w = random_attention(rng, d, dh, hq, hkv)
    X = rng.standard_normal((m, d))
    H = rng.standard_normal((n, d))
    kind = GLOBAL if window is None else LayerKind.local(window)
    return dict(m=m, n=n, d=d, dh=dh, hq=hq, hkv=hkv, window=window, base=base, pi_scale=pi_scale,
                raw=raw, w=w, X=X, H=H, kind=kind)
