"""Command-line entry point: ``edlm <command> [--config FILE] [--set KEY=VALUE ...]``.

Run settings come from a flat ``key = value`` file; ``--set`` overrides
win over the file. Keys are grouped by prefix:

    seed, dtype                      shared by every command
    model.preset, model.<field>      architecture (see ``ModelConfig``)
    train.<field>                    optimisation (see ``TrainOptions``)
    data.*                           corpus, shards, denoiser bank, toy tasks
    eval.*                           evaluation settings
    gradcheck.*                      finite-difference harness settings

Every command logs the resolved configuration to stderr and prints
``RESULT\\t...`` summary lines on stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import training, ul2
from .config import PRESETS, ModelConfig, preset
from .errors import ConfigError, DataError, EdlmError, FormatError, NumericError
from .gradcheck import directional_check, finite_diff_check
from .model import build_decoder_only, build_model, count_params
from .tensor import cross_entropy
from .vision import read_vision_fixture

log = logging.getLogger("edlm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4, 5

# order matters: subclasses before bases
EXIT_CODES = (
    (FormatError, EXIT_FORMAT),
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (NumericError, EXIT_NUMERIC),
)

_DTYPES = {"float32": np.float32, "float64": np.float64}

# settings that are not fields of ModelConfig or TrainOptions, with defaults
_EXTRA_DEFAULTS: dict[str, object] = {
    "seed": 0,
    "dtype": "float64",
    "model.preset": "toy",
    "data.corpus": "",
    "data.corpus_format": "words",  # words | ids
    "data.shards": "",
    "data.vision_fixture": "",
    "data.max_len": 512,
    "data.shard_size": 1000,
    "data.denoisers": "standard",
    "data.task": "copy",  # copy | shards
    "data.copy_count": 20_000,
    "data.copy_length": 16,
    "train.out_dir": "",
    "train.log_path": "",
    "eval.pairs": 512,
    "eval.batch_size": 64,
    "eval.needle_haystack": 0,
    "eval.needle_trials": 200,
    "gradcheck.h": 1e-5,
    "gradcheck.tol": 1e-4,
    "gradcheck.max_entries": 32,  # per tensor; 0 checks every entry
    "gradcheck.batch": 2,
    "gradcheck.length": 6,
}


# --------------------------------------------------------------------------
# run configuration


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _coerce(key: str, text: str, like):
    if like is None:  # optional float fields such as train.min_lr
        return float(text) if text.strip() else None
    try:
        if isinstance(like, bool):
            return _parse_bool(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text.strip()


def _model_fields() -> dict[str, object]:
    base = PRESETS["toy"]
    return {f.name: getattr(base, f.name) for f in dataclasses.fields(ModelConfig)}


def _train_fields() -> dict[str, object]:
    return {f.name: f.default for f in dataclasses.fields(training.TrainOptions)}


def parse_denoisers(text: str) -> tuple[ul2.DenoiserSpec, ...]:
    """``standard`` or comma-separated ``mu/r/weight`` entries; ``mu = suffix``
    gives the single-suffix task."""
    if text.strip() == "standard":
        return ul2.STANDARD_BANK
    bank = []
    for entry in filter(None, (e.strip() for e in text.split(","))):
        parts = entry.split("/")
        if len(parts) != 3:
            raise ConfigError(f"denoiser entry {entry!r} is not mu/r/weight")
        mu, r, weight = parts
        try:
            if mu == "suffix":
                spec = ul2.DenoiserSpec(None, float(r), ul2.SINGLE_SUFFIX, float(weight), f"S-{r}")
            else:
                spec = ul2.DenoiserSpec(float(mu), float(r), ul2.MULTI_SPAN, float(weight), f"{mu}-{r}")
        except (ValueError, DataError) as exc:
            raise ConfigError(f"denoiser entry {entry!r}: {exc}") from None
        bank.append(spec)
    if not bank:
        raise ConfigError("data.denoisers is empty")
    return tuple(bank)


@dataclass
class RunConfig:
    """Flat settings map; values are typed by their key."""

    values: dict[str, object] = field(default_factory=dict)

    @staticmethod
    def known_keys() -> dict[str, object]:
        keys = dict(_EXTRA_DEFAULTS)
        keys.update({f"model.{k}": v for k, v in _model_fields().items()})
        keys.update({f"train.{k}": v for k, v in _train_fields().items() if k != "seed"})
        return keys

    @classmethod
    def parse(cls, text: str, overrides: Optional[list[str]] = None) -> "RunConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = (s.strip() for s in item.split("=", 1))
            raw[key] = value
        known = cls.known_keys()
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values = {}
        for key, value in raw.items():
            values[key] = _coerce(key, value, known[key])
        cfg = cls(values)
        cfg.model_config()  # validate early
        cfg.train_options()
        parse_denoisers(cfg.get("data.denoisers"))
        if cfg.get("dtype") not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        return cfg

    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[list[str]] = None) -> "RunConfig":
        text = ""
        if path:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, overrides)

    def get(self, key: str):
        if key in self.values:
            return self.values[key]
        if key in _EXTRA_DEFAULTS:
            return _EXTRA_DEFAULTS[key]
        if key.startswith("model."):
            return getattr(preset(self.values.get("model.preset", "toy")), key[6:])
        if key.startswith("train.") and key[6:] in _train_fields():
            return _train_fields()[key[6:]]
        raise ConfigError(f"unknown config key {key!r}")

    def model_config(self) -> ModelConfig:
        overrides = {k[6:]: v for k, v in self.values.items()
                     if k.startswith("model.") and k != "model.preset"}
        try:
            return preset(self.get("model.preset"), **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_options(self) -> training.TrainOptions:
        opts = {k[6:]: v for k, v in self.values.items()
                if k.startswith("train.") and k[6:] in _train_fields()}
        opts["seed"] = self.get("seed")
        return training.TrainOptions(**opts)

    @property
    def dtype(self):
        return _DTYPES[self.get("dtype")]

    def resolved(self) -> list[str]:
        """Every key with its effective value, sorted; parseable by :meth:`parse`."""
        lines = []
        for key in sorted(self.known_keys()):
            lines.append(f"{key} = {_fmt(self.get(key))}")
        return lines


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


# --------------------------------------------------------------------------
# helpers


def _result(**fields) -> None:
    parts = [f"{k}={_fmt(v) if not isinstance(v, float) else format(v, '.6g')}" for k, v in fields.items()]
    print("RESULT\t" + "\t".join(parts), flush=True)


def _vision(cfg: RunConfig) -> Optional[np.ndarray]:
    path = cfg.get("data.vision_fixture")
    return read_vision_fixture(path) if path else None


def _shard_paths(cfg: RunConfig) -> list[str]:
    pattern = cfg.get("data.shards")
    if not pattern:
        raise ConfigError("data.shards is not set")
    paths = sorted(p for part in pattern.split(",") for p in glob.glob(part.strip()))
    if not paths:
        raise DataError(f"no shard files match {pattern!r}")
    return paths


def _read_corpus(cfg: RunConfig, path: str, mcfg: ModelConfig) -> list[list]:
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None
    fmt = cfg.get("data.corpus_format")
    docs = []
    if fmt == "ids":
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                ids = [int(x) for x in line.split()]
            except ValueError:
                raise DataError(f"{path}:{n}: expected integer token ids") from None
            if min(ids) < 0 or max(ids) >= mcfg.first_special:
                raise DataError(f"{path}:{n}: token id outside [0, {mcfg.first_special})")
            docs.append(ids)
    elif fmt == "words":
        tok = ul2.WhitespaceTokenizer(mcfg.first_special)
        docs = [d for d in (tok.encode(line) for line in lines) if d]
    else:
        raise ConfigError(f"data.corpus_format must be 'words' or 'ids', got {fmt!r}")
    if not docs:
        raise DataError(f"no documents in {path}")
    return docs


def _training_pairs(cfg: RunConfig, mcfg: ModelConfig, seed_offset: int = 0) -> list[ul2.ExamplePair]:
    task = cfg.get("data.task")
    if task == "copy":
        return training.copy_pairs(mcfg, cfg.get("data.copy_count"), cfg.get("data.copy_length"),
                                   cfg.get("seed") + seed_offset)
    if task == "shards":
        return list(ul2.iter_shards(_shard_paths(cfg)))
    raise ConfigError(f"data.task must be 'copy' or 'shards', got {task!r}")


# --------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig, args) -> None:
    mcfg = cfg.model_config()
    corpus = args.corpus or cfg.get("data.corpus")
    if not corpus:
        raise ConfigError("no corpus given (--corpus or data.corpus)")
    docs = _read_corpus(cfg, corpus, mcfg)
    bank = parse_denoisers(cfg.get("data.denoisers"))
    sentinels = mcfg.sentinel_ids()
    pairs = ul2.build_examples(docs, sentinels, cfg.get("seed"), bank, cfg.get("data.max_len"))
    if not pairs:
        raise DataError("no documents produced training examples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.get("data.shard_size")
    if size < 1:
        raise ConfigError("data.shard_size must be positive")
    n_shards = 0
    for start in range(0, len(pairs), size):
        ul2.write_shard(pairs[start:start + size], out / f"shard_{n_shards:05d}.ul2s")
        n_shards += 1
    stats = ul2.corruption_stats(pairs, sentinels)
    for tag in sorted(stats.counts):
        name = ul2.tag_name(tag, bank)
        if tag == ul2.PREFIX_LM_TAG:
            _result(denoiser=name, count=stats.counts[tag], share=stats.share(tag))
        else:
            _result(denoiser=name, count=stats.counts[tag], share=stats.share(tag),
                    corruption_rate=stats.corruption_rate(tag), mean_span=stats.mean_span(tag))
    _result(command="preprocess", documents=len(docs), examples=len(pairs), shards=n_shards)


def cmd_init_source(cfg: RunConfig, args) -> None:
    mcfg = cfg.model_config()
    params = build_decoder_only(mcfg, cfg.get("seed"), cfg.dtype)
    ckpt = ckpt_io.decoder_only_checkpoint(params, mcfg)
    ckpt_io.save(ckpt, args.out)
    _result(command="init-source", tensors=len(ckpt.tensors),
            elements=sum(t.size for t in ckpt.tensors.values()))


def cmd_adapt(cfg: RunConfig, args) -> None:
    src = ckpt_io.load(args.src)
    tgt_cfg = cfg.model_config() if (args.config or args.set) else src.config
    out = ckpt_io.adapt_from_decoder_only(src, tgt_cfg, seed=cfg.get("seed"))
    ckpt_io.save(out, args.out)
    embeddings = sum(1 for n in out.tensors if n.endswith("embedding"))
    _result(command="adapt", tensors=len(out.tensors), embedding_tensors=embeddings)


def cmd_average(cfg: RunConfig, args) -> None:
    ckpts = [ckpt_io.load(p) for p in args.checkpoints]
    out = ckpt_io.average_checkpoints(ckpts)
    ckpt_io.save(out, args.out)
    _result(command="average", inputs=len(ckpts), step=out.step, tensors=len(out.tensors))


def cmd_train(cfg: RunConfig, args) -> None:
    mcfg = cfg.model_config()
    opts = cfg.train_options()
    if args.init:
        model = ckpt_io.load(args.init).to_model()
        if model.cfg != mcfg:
            log.info("using the architecture stored in %s", args.init)
    else:
        model = build_model(mcfg, cfg.get("seed"), cfg.dtype)
    pairs = _training_pairs(cfg, model.cfg)
    out_dir = cfg.get("train.out_dir") or None
    log_path = cfg.get("train.log_path") or (str(Path(out_dir) / "metrics.tsv") if out_dir else None)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "run_config.txt").write_text("\n".join(cfg.resolved()) + "\n")
    result = training.train(model, pairs, opts, _vision(cfg), out_dir, log_path)
    if out_dir:
        ckpt_io.save(ckpt_io.Checkpoint.from_model(result.model, len(result.metrics)),
                     Path(out_dir) / "final.edck")
    last = result.metrics[-1]
    _result(command="train", steps=len(result.metrics), final_loss=last.loss, final_lr=last.lr,
            checkpoints=len(result.checkpoints))


def cmd_eval(cfg: RunConfig, args) -> None:
    model = ckpt_io.load(args.checkpoint).to_model()
    pairs = _training_pairs(cfg, model.cfg, seed_offset=1)[:cfg.get("eval.pairs")]
    bank = parse_denoisers(cfg.get("data.denoisers"))
    res = training.eval_denoising(model, pairs, _vision(cfg), cfg.get("eval.batch_size"))
    for tag, r in res.items():
        name = {training.COPY_TAG: "copy", training.NEEDLE_TAG: "needle"}.get(tag) or ul2.tag_name(tag, bank)
        _result(task=name, accuracy=r["accuracy"], perplexity=r["perplexity"], tokens=r["tokens"])
    hay = cfg.get("eval.needle_haystack")
    if hay:
        acc = training.eval_needle(model, hay, model.cfg.pi_scale, trials=cfg.get("eval.needle_trials"),
                                   seed=cfg.get("seed"))
        _result(task="needle", haystack=hay, pi_scale=model.cfg.pi_scale, accuracy=acc)


def cmd_param_count(cfg: RunConfig, args) -> None:
    counts = count_params(cfg.model_config())
    _result(**counts)


def cmd_grad_check(cfg: RunConfig, args) -> None:
    mcfg = cfg.model_config()
    model = build_model(mcfg, cfg.get("seed"), np.float64)
    rng = np.random.default_rng(cfg.get("seed"))
    B, L = cfg.get("gradcheck.batch"), cfg.get("gradcheck.length")
    toks = rng.integers(0, mcfg.first_special, size=(B, L))
    pairs = [ul2.ExamplePair(list(map(int, t)), list(map(int, t[::-1])), 0) for t in toks]
    batch = training.make_batch(model, pairs)

    def loss(params):
        return cross_entropy(training.batch_logits(model.with_params(params), batch),
                             batch.labels, batch.weights)

    max_entries = cfg.get("gradcheck.max_entries") or None
    report = finite_diff_check(loss, model.trainable(), h=cfg.get("gradcheck.h"),
                               tol=cfg.get("gradcheck.tol"), max_entries=max_entries,
                               seed=cfg.get("seed"))
    for line in report.lines():
        log.info(line)
    dirs = directional_check(loss, model.trainable(), h=cfg.get("gradcheck.h"), seed=cfg.get("seed"))
    dir_err = max(d.rel_err for d in dirs)
    passed = report.passed and dir_err <= cfg.get("gradcheck.tol")
    _result(command="grad-check", tensors=len(report.tensors), max_rel_err=report.max_rel_err,
            directional_rel_err=dir_err, passed=passed)
    if not passed:
        raise NumericError(f"gradient check failed: max rel err {report.max_rel_err:.3e}")


def cmd_describe(cfg: RunConfig, args) -> None:
    ckpt = ckpt_io.load(args.checkpoint)
    for line in ckpt.manifest():
        print(line)
    _result(command="describe", arch=ckpt.arch, step=ckpt.step, tensors=len(ckpt.tensors))


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edlm", description="Encoder-decoder toolkit: data, "
                                     "adaptation, averaging, training and checks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE", help="flat key = value run configuration")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       help="override one config key; may be repeated, wins over --config")
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "Turn a corpus into UL2 example shards and report statistics.")
    p.add_argument("--corpus", metavar="PATH", help="one document per line (overrides data.corpus)")
    p.add_argument("--out", metavar="DIR", required=True, help="directory for shard files")

    p = add("init-source", cmd_init_source, "Write a freshly initialised decoder-only checkpoint.")
    p.add_argument("--out", metavar="PATH", required=True, help="checkpoint to write")

    p = add("adapt", cmd_adapt, "Initialise an encoder-decoder checkpoint from a decoder-only one.")
    p.add_argument("--src", metavar="PATH", required=True, help="decoder-only source checkpoint")
    p.add_argument("--out", metavar="PATH", required=True, help="encoder-decoder checkpoint to write")

    p = add("average", cmd_average, "Elementwise mean of several checkpoints.")
    p.add_argument("checkpoints", metavar="CKPT", nargs="+", help="input checkpoints")
    p.add_argument("--out", metavar="PATH", required=True, help="averaged checkpoint to write")

    p = add("train", cmd_train, "Train a model on shards or the copy task.")
    p.add_argument("--init", metavar="PATH", help="start from this encoder-decoder checkpoint")

    p = add("eval", cmd_eval, "Teacher-forced accuracy and perplexity, optionally needle retrieval.")
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="encoder-decoder checkpoint")

    add("param-count", cmd_param_count, "Closed-form parameter breakdown of the configured model.")
    add("grad-check", cmd_grad_check, "Compare tape gradients with central finite differences.")

    p = add("describe", cmd_describe, "Print the tensor manifest of a checkpoint.")
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint to describe")
    return parser


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = RunConfig.load(args.config, args.set)
        for line in cfg.resolved():
            log.info("config: %s", line)
        args.func(cfg, args)
    except EdlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
