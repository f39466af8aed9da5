"""Command-line entry point.

Subcommands: prepare, train, ce, finetune, pipeline, eval. Every run-config
key can be set in a flat ``key = value`` config file (# comments allowed) and
overridden by the flag of the same name; unknown keys are rejected.

Exit codes: 0 ok, 2 usage or input error, 3 collapse abort, 4 divergence.
Logging level comes from CE_NMT_LOG (quiet, info, debug) and goes to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import training as TR
from .data import ParallelCorpus, Vocabulary, build_vocab, load_parallel_corpus, \
    load_pretrained_embeddings
from .errors import CENMTError, CollapseError, ConfigError, DivergenceError
from .model import ModelConfig

log = logging.getLogger("ce_nmt")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COLLAPSE = 3
EXIT_DIVERGENCE = 4


@dataclass
class RunConfig:
    source: str | None = None
    target: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    baseline_checkpoint: str | None = None
    mode: str | None = None
    out: str = "run"
    seed: int = 0
    depth: int = 2
    dim: int = 64
    heads: int = 4
    ff_dim: int = 0
    emb_dim: int = 64
    proj_dim: int = 32
    pooling: str = "mean"
    dropout: float = 0.0
    max_len: int = 32
    min_freq: int = 1
    max_vocab: int = 50_000
    batch_size: int = 64
    steps: int = 1000
    finetune_steps: int = -1          # -1 means "same as steps"
    lr: float = 1e-3
    warmup: int = 400
    lam: float = 5e-3
    epochs: int = 50
    skip_pretrain: bool = False
    reuse_decoder: bool = False
    precision: str = "float64"

    def dtype(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        return np.float32 if self.precision == "float32" else np.float64


# config-file key <-> dataclass attribute ("lambda" is a Python keyword)
_KEY_TO_ATTR = {f.name: f.name for f in dataclasses.fields(RunConfig)}
_KEY_TO_ATTR["lambda"] = "lam"
del _KEY_TO_ATTR["lam"]
_BOOL_KEYS = {"skip_pretrain", "reuse_decoder"}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_config_file(path) -> dict[str, object]:
    """Flat ``key = value`` lines with # comments; unknown keys rejected."""
    values: dict[str, object] = {}
    defaults = RunConfig()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEY_TO_ATTR:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        attr = _KEY_TO_ATTR[key]
        if attr in _BOOL_KEYS:
            lowered = value.lower()
            if lowered in _TRUE:
                values[attr] = True
            elif lowered in _FALSE:
                values[attr] = False
            else:
                raise ConfigError(f"{path}:{lineno}: expected a boolean for {key}, got {value!r}")
            continue
        default = getattr(defaults, attr)
        try:
            if isinstance(default, bool):
                raise AssertionError
            if isinstance(default, int):
                values[attr] = int(value)
            elif isinstance(default, float):
                values[attr] = float(value)
            else:
                values[attr] = value
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    defaults = RunConfig()

    def flag(key: str, attr: str, **kwargs):
        common.add_argument(f"--{key.replace('_', '-')}", dest=attr, default=None, **kwargs)

    flag("source", "source", help="source-side corpus file")
    flag("target", "target", help="target-side corpus file")
    flag("embeddings", "embeddings", help="pre-trained embedding file for the encoder")
    flag("checkpoint", "checkpoint", help="input checkpoint path")
    flag("baseline-checkpoint", "baseline_checkpoint",
         help="pre-enhancement checkpoint for classify mode")
    flag("mode", "mode", choices=["bleu", "classify", "centroid", "diagnostics"],
         help="eval mode")
    flag("out", "out", help=f"output directory (default {defaults.out})")
    flag("seed", "seed", type=int, help="global random seed")
    flag("depth", "depth", type=int, help="encoder/decoder layers")
    flag("dim", "dim", type=int, help="model width")
    flag("heads", "heads", type=int, help="attention heads")
    flag("ff-dim", "ff_dim", type=int, help="feed-forward width (0 = 4*dim)")
    flag("emb-dim", "emb_dim", type=int, help="token embedding width")
    flag("proj-dim", "proj_dim", type=int, help="projection output width")
    flag("pooling", "pooling", choices=["mean", "max"], help="sentence pooling kind")
    flag("dropout", "dropout", type=float, help="dropout rate")
    flag("max-len", "max_len", type=int, help="max encoded sentence length")
    flag("min-freq", "min_freq", type=int, help="vocabulary frequency cutoff")
    flag("max-vocab", "max_vocab", type=int, help="vocabulary size cap")
    flag("batch-size", "batch_size", type=int, help="training batch size")
    flag("steps", "steps", type=int, help="translation training steps")
    flag("finetune-steps", "finetune_steps", type=int,
         help="fine-tuning steps (-1 = same as steps)")
    flag("lr", "lr", type=float, help="peak learning rate")
    flag("warmup", "warmup", type=int, help="linear warmup steps")
    flag("lambda", "lam", type=float, help="redundancy term weight")
    flag("epochs", "epochs", type=int, help="context-enhancement epochs")
    flag("skip-pretrain", "skip_pretrain", action="store_const", const=True,
         help="start enhancement from a fresh encoder")
    flag("reuse-decoder", "reuse_decoder", action="store_const", const=True,
         help="fine-tune with the carried decoder instead of a fresh one")
    flag("precision", "precision", choices=["float32", "float64"],
         help="numeric precision (float64 is the reproducibility mode)")

    parser = argparse.ArgumentParser(
        prog="ce-nmt",
        description="Context-enhanced NMT: prepare data, train, enhance, fine-tune, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build vocabularies and corpus stats")
    sub.add_parser("train", parents=[common], help="stage 1: translation pre-training")
    sub.add_parser("ce", parents=[common], help="stage 2: context enhancement")
    sub.add_parser("finetune", parents=[common], help="stage 3: translation fine-tuning")
    sub.add_parser("pipeline", parents=[common], help="all three stages")
    sub.add_parser("eval", parents=[common], help="bleu / classify / centroid / diagnostics")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, object] = {}
    if args.config is not None:
        values.update(parse_config_file(args.config))
    for attr in _KEY_TO_ATTR.values():
        cli_value = getattr(args, attr, None)
        if cli_value is not None:
            values[attr] = cli_value
    return RunConfig(**values)


def _require(cfg: RunConfig, *attrs: str) -> None:
    missing = [a for a in attrs if getattr(cfg, a) in (None, "")]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _load_corpus(cfg: RunConfig) -> ParallelCorpus:
    _require(cfg, "source", "target")
    for path in (cfg.source, cfg.target):
        if not Path(path).exists():
            raise ConfigError(f"corpus file not found: {path}")
    return load_parallel_corpus(cfg.source, cfg.target)


def _build_vocabs(cfg: RunConfig, corpus: ParallelCorpus) -> tuple[Vocabulary, Vocabulary]:
    """Encoder vocabulary covers both sides: the shared encoder must embed
    either language during enhancement. Decoder vocabulary is target-only."""
    joint = [p.source for p in corpus] + [p.target for p in corpus]
    vocab_src = build_vocab(joint, min_freq=cfg.min_freq, max_size=cfg.max_vocab)
    vocab_tgt = build_vocab([p.target for p in corpus], min_freq=cfg.min_freq,
                            max_size=cfg.max_vocab)
    return vocab_src, vocab_tgt


def _save_vocabs(out: Path, vocab_src: Vocabulary, vocab_tgt: Vocabulary) -> None:
    out.mkdir(parents=True, exist_ok=True)
    vocab_src.save(out / "vocab.src.txt")
    vocab_tgt.save(out / "vocab.tgt.txt")


def _vocabs_near_checkpoint(ckpt_path: Path) -> tuple[Vocabulary, Vocabulary]:
    folder = ckpt_path.parent
    src, tgt = folder / "vocab.src.txt", folder / "vocab.tgt.txt"
    if not src.exists() or not tgt.exists():
        raise ConfigError(f"vocabulary files not found next to checkpoint in {folder}")
    return Vocabulary.load(src), Vocabulary.load(tgt)


def _model_config(cfg: RunConfig, vocab_src: Vocabulary, vocab_tgt: Vocabulary) -> ModelConfig:
    return ModelConfig(
        src_vocab=len(vocab_src), tgt_vocab=len(vocab_tgt), depth=cfg.depth, dim=cfg.dim,
        heads=cfg.heads, ff_dim=cfg.ff_dim, proj_dim=cfg.proj_dim, pooling=cfg.pooling,
        emb_dim=cfg.emb_dim, dropout=cfg.dropout, max_len=cfg.max_len,
    )


def _embed_table(cfg: RunConfig, vocab_src: Vocabulary) -> np.ndarray | None:
    if not cfg.embeddings:
        return None
    table, report = load_pretrained_embeddings(cfg.embeddings, vocab_src, cfg.emb_dim,
                                               seed=cfg.seed)
    log.info("loaded embeddings: %d hits, %d misses (coverage %.1f%%)",
             report.hits, report.misses, 100 * report.coverage)
    return table


def _ce_config(cfg: RunConfig) -> TR.CEConfig:
    return TR.CEConfig(lam=cfg.lam, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       pooling=cfg.pooling, proj_dim=cfg.proj_dim)


def _record_time(cfg: RunConfig) -> bool:
    return cfg.dtype() == np.float32


def _load_checkpoint_arg(cfg: RunConfig, attr: str = "checkpoint") -> TR.Checkpoint:
    _require(cfg, attr)
    path = Path(getattr(cfg, attr))
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return TR.load_checkpoint(path, dtype=cfg.dtype())


# -- commands -----------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    vocab_src, vocab_tgt = _build_vocabs(cfg, corpus)
    out = Path(cfg.out)
    _save_vocabs(out, vocab_src, vocab_tgt)

    def histogram(side):
        counts: dict[int, int] = {}
        for pair in corpus:
            n = len(getattr(pair, side))
            counts[n] = counts.get(n, 0) + 1
        return {str(k): counts[k] for k in sorted(counts)}

    stats = {
        "pair_count": len(corpus),
        "encoder_vocab": len(vocab_src),
        "decoder_vocab": len(vocab_tgt),
        "source_length_histogram": histogram("source"),
        "target_length_histogram": histogram("target"),
    }
    (out / "corpus_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(json.dumps(stats))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    vocab_src, vocab_tgt = _build_vocabs(cfg, corpus)
    out = Path(cfg.out)
    _save_vocabs(out, vocab_src, vocab_tgt)
    metrics = TR.MetricsLog(out / "metrics.jsonl", record_time=_record_time(cfg))
    ckpt = TR.train_translation(
        _model_config(cfg, vocab_src, vocab_tgt), corpus, vocab_src, vocab_tgt,
        cfg.seed, cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, warmup=cfg.warmup,
        dtype=cfg.dtype(), metrics=metrics, out_dir=out,
        embed_table=_embed_table(cfg, vocab_src),
    )
    path = TR.save_checkpoint(ckpt, out / f"pretrain-{ckpt.step}.ckpt")
    print(f"saved {path}")
    return EXIT_OK


def cmd_ce(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    out = Path(cfg.out)
    if cfg.checkpoint:
        start = _load_checkpoint_arg(cfg)
        vocab_src, vocab_tgt = _vocabs_near_checkpoint(Path(cfg.checkpoint))
        _save_vocabs(out, vocab_src, vocab_tgt)
    else:
        vocab_src, vocab_tgt = _build_vocabs(cfg, corpus)
        _save_vocabs(out, vocab_src, vocab_tgt)
        rng = np.random.default_rng(cfg.seed)
        from . import model as M

        mc = _model_config(cfg, vocab_src, vocab_tgt)
        enc = M.init_encoder_params(mc, rng, dtype=cfg.dtype(),
                                    embed_table=_embed_table(cfg, vocab_src))
        start = TR.Checkpoint(mc, "ce", cfg.seed, 0, enc,
                              projection=M.init_projection_params(mc, rng, dtype=cfg.dtype()))
    metrics = TR.MetricsLog(out / "metrics.jsonl", record_time=_record_time(cfg))
    ckpt = TR.context_enhance(start, corpus, vocab_src, _ce_config(cfg), cfg.seed,
                              lr=cfg.lr, warmup=max(1, cfg.warmup // 4),
                              metrics=metrics, out_dir=out)
    path = TR.save_checkpoint(ckpt, out / f"ce-{ckpt.step}.ckpt")
    print(f"saved {path}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    ce_ckpt = _load_checkpoint_arg(cfg)
    vocab_src, vocab_tgt = _vocabs_near_checkpoint(Path(cfg.checkpoint))
    out = Path(cfg.out)
    _save_vocabs(out, vocab_src, vocab_tgt)
    steps = cfg.finetune_steps if cfg.finetune_steps >= 0 else cfg.steps
    metrics = TR.MetricsLog(out / "metrics.jsonl", record_time=_record_time(cfg))
    ckpt = TR.finetune_translation(ce_ckpt, corpus, vocab_src, vocab_tgt, steps, cfg.seed,
                                   batch_size=cfg.batch_size, lr=cfg.lr, warmup=cfg.warmup,
                                   reuse_decoder=cfg.reuse_decoder, metrics=metrics,
                                   out_dir=out)
    path = TR.save_checkpoint(ckpt, out / f"finetune-{ckpt.step}.ckpt")
    print(f"saved {path}")
    return EXIT_OK


def cmd_pipeline(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    vocab_src, vocab_tgt = _build_vocabs(cfg, corpus)
    out = Path(cfg.out)
    _save_vocabs(out, vocab_src, vocab_tgt)
    result = TR.run_pipeline(
        _model_config(cfg, vocab_src, vocab_tgt), _ce_config(cfg), corpus,
        vocab_src, vocab_tgt, cfg.seed, out,
        steps=cfg.steps,
        finetune_steps=cfg.finetune_steps if cfg.finetune_steps >= 0 else None,
        batch_size=cfg.batch_size, lr=cfg.lr, warmup=cfg.warmup,
        skip_pretrain=cfg.skip_pretrain, reuse_decoder=cfg.reuse_decoder,
        embed_table=_embed_table(cfg, vocab_src), dtype=cfg.dtype(),
        record_time=_record_time(cfg),
    )
    for stage, path in result.paths.items():
        print(f"{stage}: {path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "mode")
    corpus = _load_corpus(cfg)
    ckpt = _load_checkpoint_arg(cfg)
    vocab_src, vocab_tgt = _vocabs_near_checkpoint(Path(cfg.checkpoint))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.mode == "bleu":
        if ckpt.decoder is None:
            raise ConfigError(
                f"bleu mode needs a decoder; the {ckpt.stage!r} checkpoint carries none")
        hyps = E.translate_corpus(ckpt, corpus, vocab_src, vocab_tgt,
                                  batch_size=cfg.batch_size)
        refs = [list(p.target) for p in corpus]
        score = E.bleu(hyps, refs)
        (out / "bleu.json").write_text(json.dumps({"bleu": score}) + "\n")
        print(f"BLEU {score:.2f}")
        return EXIT_OK

    if cfg.mode == "classify":
        baseline_ckpt = _load_checkpoint_arg(cfg, "baseline_checkpoint")
        baseline, labels = E.corpus_probe_embeddings(baseline_ckpt, corpus, vocab_src,
                                                     batch_size=cfg.batch_size)
        enhanced, _ = E.corpus_probe_embeddings(ckpt, corpus, vocab_src,
                                                batch_size=cfg.batch_size)
        result = E.run_protocol(baseline, enhanced, labels, seed=cfg.seed)
        payload = result.summary()
        (out / "classify.json").write_text(json.dumps(payload) + "\n")
        print(json.dumps(payload))
        return EXIT_OK

    if cfg.mode == "centroid":
        sent_emb, sent_labels = E.corpus_probe_embeddings(ckpt, corpus, vocab_src,
                                                          batch_size=cfg.batch_size)
        payload = {"sentence": E.run_centroid_protocol(sent_emb, sent_labels,
                                                       seed=cfg.seed).summary()}
        try:
            word_emb, word_labels = E.word_probe_embeddings(ckpt, corpus, vocab_src)
            payload["word"] = E.run_centroid_protocol(word_emb, word_labels,
                                                      seed=cfg.seed).summary()
        except CENMTError as exc:
            payload["word"] = {"error": str(exc)}
        (out / "centroid.json").write_text(json.dumps(payload) + "\n")
        print(json.dumps(payload))
        return EXIT_OK

    # diagnostics
    files = E.export_diagnostics(ckpt, corpus, vocab_src, out, vocab_tgt=vocab_tgt,
                                 batch_size=min(cfg.batch_size, 8))
    print(f"wrote {len(files)} diagnostic files to {out}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "ce": cmd_ce,
    "finetune": cmd_finetune,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
}


def _configure_logging() -> None:
    level_name = os.environ.get("CE_NMT_LOG", "info").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: unknown CE_NMT_LOG value {level_name!r}; using info", file=sys.stderr)
        level_name = "info"
    logging.basicConfig(level=levels[level_name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except CollapseError as exc:
        log.error("collapse: %s", exc)
        return EXIT_COLLAPSE
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except (CENMTError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
