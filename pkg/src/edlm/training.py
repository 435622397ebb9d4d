"""Toy-scale training: cross-entropy, warmup + cosine schedule, global norm
clipping, AdamW, checkpoint rotation, and small evaluations."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .errors import ConfigError, DataError, NumericError
from .model import Model, decoder_stack, encode_batch
from .tensor import GradTape, Tensor, cross_entropy, log_softmax
from .ul2 import ExamplePair

log = logging.getLogger(__name__)

COPY_TAG = 6
NEEDLE_TAG = 7
_DECAYED = (".q", ".k", ".v", ".o", ".gate", ".up", ".down")


@dataclass
class TrainOptions:
    peak_lr: float = 1e-3
    min_lr: Optional[float] = None  # defaults to 0.1 * peak_lr
    warmup_steps: int = 100
    total_steps: int = 1000
    clip_norm: float = 1.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    keep_last: int = 5

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.batch_size < 1 or self.keep_last < 1:
            raise ConfigError("batch_size and keep_last must be positive")

    @property
    def floor_lr(self) -> float:
        return 0.1 * self.peak_lr if self.min_lr is None else self.min_lr


def lr_at(step: int, opts: TrainOptions) -> float:
    """Linear warmup from 0 to peak, then cosine decay to the floor."""
    if not 0 <= step <= opts.total_steps:
        raise ConfigError(f"step {step} outside [0, {opts.total_steps}]")
    w, T = opts.warmup_steps, opts.total_steps
    if step < w:
        return opts.peak_lr * step / w
    frac = (step - w) / (T - w)
    lo = opts.floor_lr
    return lo + 0.5 * (opts.peak_lr - lo) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in grads.values()))


def clip_global_norm(grads: dict[str, Tensor], max_norm: float = 1.0) -> tuple[dict[str, Tensor], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) scaled gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: Tensor._wrap(g.data * scale) for k, g in grads.items()}, norm


class AdamW:
    """Adaptive moments with decoupled weight decay on projection matrices only."""

    def __init__(self, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @staticmethod
    def decays(name: str) -> bool:
        return name.endswith(_DECAYED)

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor], lr: float) -> dict[str, Tensor]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, g in grads.items():
            p = params[name].data
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g.data
            v = b2 * v + (1 - b2) * g.data * g.data
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and self.decays(name):
                upd = upd + self.weight_decay * p
            out[name] = Tensor._wrap((p - lr * upd).astype(p.dtype))
        return out


# --------------------------------------------------------------------------
# batches and loss


@dataclass
class Batch:
    inputs: list
    dec_in: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    tags: np.ndarray


def make_batch(model: Model, pairs: Sequence[ExamplePair]) -> Batch:
    """Decoder reads ``BOS + target`` and predicts ``target + EOS``; pads carry weight 0."""
    cfg = model.cfg
    m = max(len(p.target) for p in pairs) + 1
    B = len(pairs)
    dec_in = np.full((B, m), cfg.pad_id, dtype=np.int64)
    labels = np.full((B, m), cfg.pad_id, dtype=np.int64)
    weights = np.zeros((B, m))
    for b, p in enumerate(pairs):
        t = list(p.target)
        dec_in[b, :len(t) + 1] = [cfg.bos_id] + t
        labels[b, :len(t) + 1] = t + [cfg.eos_id]
        weights[b, :len(t) + 1] = 1.0
    if labels.max() >= cfg.vocab_size:
        raise DataError(f"token id {labels.max()} outside vocabulary of {cfg.vocab_size}")
    return Batch([p.input for p in pairs], dec_in, labels, weights, np.array([p.tag for p in pairs]))


def batch_logits(model: Model, batch: Batch, images=None) -> Tensor:
    H, valid = encode_batch(model, batch.inputs, images)
    return decoder_stack(model, batch.dec_in, H, key_valid=None if valid.all() else valid)


def batch_loss(model: Model, batch: Batch, images=None) -> Tensor:
    return cross_entropy(batch_logits(model, batch, images), batch.labels, batch.weights)


def loss_and_grads(model: Model, batch: Batch, images=None) -> tuple[float, dict[str, Tensor]]:
    params = model.trainable()
    with GradTape() as tape:
        tape.watch(params)
        loss = batch_loss(model, batch, images)
    return loss.item(), tape.gradient(loss, params)


# --------------------------------------------------------------------------
# training loop


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    grad_norm: float
    clipped: bool

    def line(self) -> str:
        return f"{self.step}\t{self.lr!r}\t{self.loss!r}\t{self.grad_norm!r}\t{int(self.clipped)}"


@dataclass
class TrainResult:
    model: Model
    metrics: list[StepMetrics] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [m.line() for m in self.metrics]


def _sample(n_pairs: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return rng.choice(n_pairs, size=batch_size, replace=n_pairs < batch_size)


def train(model: Model, pairs: Sequence[ExamplePair], opts: TrainOptions, images=None,
          out_dir=None, log_path=None,
          callback: Optional[Callable[[int, Model], Optional[bool]]] = None) -> TrainResult:
    """Run ``opts.total_steps`` optimisation steps on ``pairs``.

    Each step samples a batch from its own RNG stream, computes the mean
    loss over non-pad target tokens, clips the global gradient norm and
    applies AdamW with ``lr_at(step)``. Frozen parameters are never updated.
    ``callback(step, model)`` may return True to stop early.
    """
    if not pairs:
        raise DataError("no training examples")
    opt = AdamW(opts.beta1, opts.beta2, opts.adam_eps, opts.weight_decay)
    result = TrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, opts.total_steps + 1):
            lr = lr_at(step, opts)
            idx = _sample(len(pairs), opts.batch_size, opts.seed, step)
            batch = make_batch(model, [pairs[i] for i in idx])
            try:
                loss, grads = loss_and_grads(model, batch, images)
                grads, norm = clip_global_norm(grads, opts.clip_norm)
            except NumericError as exc:
                raise NumericError(f"training diverged at step {step} (lr {lr:.3g}): {exc}") from None
            model = model.with_params(opt.step(model.params, grads, lr))
            rec = StepMetrics(step, lr, loss, norm, norm > opts.clip_norm)
            result.metrics.append(rec)
            if log_fh is not None:
                log_fh.write(rec.line() + "\n")
            if out_dir is not None and opts.checkpoint_interval and step % opts.checkpoint_interval == 0:
                path = out_dir / f"ckpt_{step:07d}.edck"
                ckpt_io.save(ckpt_io.Checkpoint.from_model(model, step), path)
                result.checkpoints.append(path)
                while len(result.checkpoints) > opts.keep_last:
                    result.checkpoints.pop(0).unlink()
            if step % 100 == 0:
                log.info("step %d lr %.3g loss %.4f |g| %.3f", step, lr, loss, norm)
            if callback is not None and callback(step, model):
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    result.model = model
    return result


# --------------------------------------------------------------------------
# evaluation


def _batches(pairs: Sequence[ExamplePair], size: int):
    for i in range(0, len(pairs), size):
        yield pairs[i:i + size]


def eval_denoising(model: Model, pairs: Sequence[ExamplePair], images=None, batch_size: int = 32,
                   logits_fn: Optional[Callable[[Model, Batch], np.ndarray]] = None) -> dict[int, dict]:
    """Teacher-forced token accuracy and perplexity for each denoiser tag."""
    logits_fn = logits_fn or (lambda mdl, b: batch_logits(mdl, b, images).data)
    acc: dict[int, list[float]] = {}
    for chunk in _batches(pairs, batch_size):
        batch = make_batch(model, chunk)
        logp = log_softmax(np.asarray(logits_fn(model, batch), dtype=np.float64))
        nll = -np.take_along_axis(logp, batch.labels[..., None], axis=-1)[..., 0]
        hit = logp.argmax(axis=-1) == batch.labels
        for b, tag in enumerate(batch.tags):
            w = batch.weights[b] > 0
            s = acc.setdefault(int(tag), [0.0, 0.0, 0.0])
            s[0] += float(hit[b][w].sum())
            s[1] += float(nll[b][w].sum())
            s[2] += float(w.sum())
    return {tag: {"accuracy": h / n, "perplexity": math.exp(l / n), "tokens": int(n)}
            for tag, (h, l, n) in sorted(acc.items())}


def token_accuracy(model: Model, pairs: Sequence[ExamplePair], images=None, batch_size: int = 64) -> float:
    res = eval_denoising(model, pairs, images, batch_size)
    hits = sum(r["accuracy"] * r["tokens"] for r in res.values())
    return hits / sum(r["tokens"] for r in res.values())


def copy_pairs(model_cfg, count: int, length: int, seed: int) -> list[ExamplePair]:
    """Copy task: the target repeats the input tokens."""
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, model_cfg.first_special, size=(count, length))
    return [ExamplePair(list(map(int, row)), list(map(int, row)), COPY_TAG) for row in toks]


@dataclass
class NeedleTask:
    """Key/value retrieval. Keys and values use disjoint id ranges."""

    num_keys: int = 20
    num_values: int = 20

    def pairs(self, haystack_len: int, count: int, seed: int) -> list[ExamplePair]:
        if haystack_len > self.num_keys:
            raise DataError(f"haystack of {haystack_len} pairs needs at least that many keys")
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(count):
            keys = rng.choice(self.num_keys, size=haystack_len, replace=False)
            vals = self.num_keys + rng.integers(0, self.num_values, size=haystack_len)
            inp = [int(x) for kv in zip(keys, vals) for x in kv]
            q = int(rng.integers(haystack_len))
            out.append(ExamplePair(inp, [int(keys[q]), int(vals[q])], NEEDLE_TAG))
        return out


def eval_needle(model: Model, haystack_len: int, pi_scale: float, task: NeedleTask = NeedleTask(),
                trials: int = 200, seed: int = 1234) -> float:
    """Exact-match retrieval accuracy; the answer is the argmax over value ids."""
    probe = Model(model.cfg.replace(pi_scale=pi_scale), model.params)
    pairs = task.pairs(haystack_len, trials, seed)
    hits = 0
    for chunk in _batches(pairs, 64):
        batch = make_batch(probe, chunk)
        logits = batch_logits(probe, batch).data[:, 1, task.num_keys:task.num_keys + task.num_values]
        hits += int((logits.argmax(axis=-1) + task.num_keys == batch.labels[:, 1]).sum())
    return hits / len(pairs)


def options_dict(opts: TrainOptions) -> dict:
    return asdict(opts)
