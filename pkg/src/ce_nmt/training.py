"""Three-stage training pipeline with checkpointing and collapse monitoring.

Stages:
  1. translation pre-training of encoder + decoder on cross-entropy,
  2. context enhancement: the shared encoder encodes both sides of each
     parallel batch; pooled embeddings are projected, batch-normalized, and
     pulled together by the Barlow Twins loss (decoder untouched),
  3. translation fine-tuning from the enhanced encoder, with the pooling /
     projection / batch-norm stack bypassed entirely.

Determinism contract: for a fixed seed and config, every stage produces a
bit-identical metrics log at 64-bit precision. Timing is therefore only
recorded (``wall_ms``) in float32 runs; 64-bit runs log ``wall_ms: null``.

Seed layout (documented, fixed): parameter init uses ``seed``, epoch e of a
stage shuffles with ``seed + 1000 + e``, dropout draws from ``seed + 7919``.
The pipeline runs its stages with ``seed``, ``seed + 1``, ``seed + 2``.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .data import ParallelCorpus, Vocabulary, batch_iter
from .errors import CollapseError, ConfigError, DivergenceError, NumericError
from .losses import barlow_twins_loss, translation_loss
from .model import (
    DecoderParams,
    EncoderParams,
    ModelConfig,
    ParamGroup,
    ProjectionParams,
)
from .numerics import Tensor

CHECKPOINT_MAGIC = b"CENMT\x00"
CHECKPOINT_VERSION = 1
STAGES = ("pretrain", "ce", "finetune")

# Abort context enhancement only on a sustained collapse signal: healthy runs
# show isolated sub-threshold effective-rank batches (anisotropic but sound
# geometry), while a genuinely collapsed stream flags every observation.
COLLAPSE_PATIENCE = 3


# -- optimizer ----------------------------------------------------------------


class AdamOptimizer:
    """Adaptive moments with linear warmup and inverse-sqrt decay.

    rate(t) = lr * min(t / warmup, sqrt(warmup / t)); the peak rate ``lr``
    is reached exactly at ``t = warmup``. Gradients are clipped to a global
    norm before each update.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, warmup: int = 4000,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9,
                 clip_norm: float = 1.0):
        if warmup < 1:
            raise ConfigError(f"warmup must be >= 1, got {warmup}")
        self.params = dict(params)
        self.lr = lr
        self.warmup = warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.values) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in self.params.items()}

    def rate(self, step: int) -> float:
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))

    def step(self) -> None:
        self.step_count += 1
        grads = {}
        sq_sum = 0.0
        for k, t in self.params.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.values)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {k}")
            grads[k] = g
            sq_sum += float((g.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq_sum)
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        rate = self.rate(self.step_count)
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for k, t in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            t.values -= (rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(t.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# -- metrics ------------------------------------------------------------------


class MetricsLog:
    """JSON-lines metrics sink with a fixed field order.

    ``wall_ms`` is milliseconds since the previous record when timing is
    enabled, else null; invariance/redundancy/lambda are null outside CE.
    """

    def __init__(self, path, record_time: bool = False):
        self.path = Path(path)
        self.record_time = record_time
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self._last = time.monotonic()
        self.count = 0

    def write(self, stage: str, step_or_epoch: int, loss: float,
              invariance: float | None = None, redundancy: float | None = None,
              lam: float | None = None) -> None:
        now = time.monotonic()
        wall = int((now - self._last) * 1000) if self.record_time else None
        self._last = now
        record = {
            "stage": stage,
            "step_or_epoch": step_or_epoch,
            "loss": loss,
            "invariance_term": invariance,
            "redundancy_term": redundancy,
            "lambda": lam,
            "wall_ms": wall,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        self.count += 1


# -- collapse monitoring ------------------------------------------------------


@dataclass
class CollapseReport:
    status: str                      # "insufficient data" | "ok" | "collapsed"
    observations: int = 0
    initial_std: float | None = None
    latest_std: float | None = None
    effective_rank: float | None = None
    reason: str | None = None

    def __str__(self) -> str:
        return (f"{self.status} (obs={self.observations}, std {self.initial_std} -> "
                f"{self.latest_std}, erank={self.effective_rank}, {self.reason})")


def effective_rank(embeddings: np.ndarray) -> float:
    """Participation ratio of the covariance spectrum, (sum l)^2 / sum l^2."""
    H = np.asarray(embeddings, dtype=np.float64)
    H = H - H.mean(axis=0, keepdims=True)
    m = H.shape[0]
    gram = H.T @ H / m
    tr = np.trace(gram)
    tr_sq = float((gram * gram).sum())
    if tr_sq <= 0.0:
        return 0.0
    return float(tr * tr / tr_sq)


class CollapseMonitor:
    """Tracks sentence-embedding spread across batches and flags collapse.

    Collapse is flagged (from the second observation onward) when the mean
    per-dimension standard deviation falls below ``rel_std_threshold`` times
    its initial value, or the effective rank falls below ``min_rank``.
    """

    def __init__(self, rel_std_threshold: float = 1e-3, min_rank: float = 2.0):
        self.rel_std_threshold = rel_std_threshold
        self.min_rank = min_rank
        self.observations = 0
        self.initial_std: float | None = None
        self.latest_std: float | None = None
        self.latest_rank: float | None = None

    def observe(self, embeddings: np.ndarray) -> CollapseReport:
        emb = np.asarray(embeddings, dtype=np.float64)
        self.observations += 1
        self.latest_std = float(emb.std(axis=0).mean())
        self.latest_rank = effective_rank(emb)
        if self.initial_std is None:
            self.initial_std = self.latest_std
        return self.report()

    def report(self) -> CollapseReport:
        base = CollapseReport(
            status="insufficient data",
            observations=self.observations,
            initial_std=self.initial_std,
            latest_std=self.latest_std,
            effective_rank=self.latest_rank,
        )
        if self.observations < 2:
            return base
        if self.latest_rank < self.min_rank:
            base.status = "collapsed"
            base.reason = f"effective rank {self.latest_rank:.3f} < {self.min_rank}"
        elif self.latest_std < self.rel_std_threshold * self.initial_std:
            base.status = "collapsed"
            base.reason = (f"mean per-dim std {self.latest_std:.3e} below "
                           f"{self.rel_std_threshold} x initial {self.initial_std:.3e}")
        else:
            base.status = "ok"
        return base


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    seed: int
    step: int
    encoder: EncoderParams
    decoder: DecoderParams | None = None
    projection: ProjectionParams | None = None
    optimizer: AdamOptimizer | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.stage == "ce" and self.projection is None:
            raise ConfigError("a ce checkpoint requires projection parameters")
        if self.stage in ("pretrain", "finetune") and self.decoder is None:
            raise ConfigError(f"a {self.stage} checkpoint requires decoder parameters")


_F32_MAX = float(np.finfo(np.float32).max)


def _write_array(buf: io.BytesIO, name: str, values: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", values.ndim))
    for dim in values.shape:
        buf.write(struct.pack("<I", dim))
    # Clamp into float32 range so even diverged diagnostic checkpoints stay
    # finite and loadable.
    clamped = np.clip(values, -_F32_MAX, _F32_MAX)
    buf.write(np.ascontiguousarray(clamped, dtype="<f4").tobytes())


def _read_array(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", buf.read(4))
    name = buf.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    values = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, values


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, version, JSON header, then named float32 tensors."""
    groups = [("encoder", ckpt.encoder)]
    if ckpt.decoder is not None:
        groups.append(("decoder", ckpt.decoder))
    if ckpt.projection is not None:
        groups.append(("projection", ckpt.projection))
    header = {
        "config": ckpt.config.to_dict(),
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "groups": [g for g, _ in groups],
        "optimizer": None,
    }
    opt_arrays: list[tuple[str, np.ndarray]] = []
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        header["optimizer"] = {
            "step_count": opt.step_count, "lr": opt.lr, "warmup": opt.warmup,
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "clip_norm": opt.clip_norm, "params": list(opt.params.keys()),
        }
        for k in opt.params:
            opt_arrays.append((f"opt.m.{k}", opt.m[k]))
            opt_arrays.append((f"opt.v.{k}", opt.v[k]))
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for group_name, group in groups:
        for name, tensor in group.items():
            _write_array(buf, f"{group_name}.{name}", tensor.values)
    for name, values in opt_arrays:
        _write_array(buf, name, values)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path, dtype=np.float64) -> Checkpoint:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(header_len).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    while buf.tell() < len(raw):
        name, values = _read_array(buf)
        arrays[name] = values

    def group(prefix: str, cls):
        tensors = {
            name[len(prefix) + 1:]: Tensor(values.astype(dtype), requires_grad=True)
            for name, values in arrays.items()
            if name.startswith(prefix + ".") and not name.startswith("opt.")
        }
        return cls(tensors) if tensors else None

    cfg = ModelConfig.from_dict(header["config"])
    ckpt = Checkpoint(
        config=cfg,
        stage=header["stage"],
        seed=header["seed"],
        step=header["step"],
        encoder=group("encoder", EncoderParams),
        decoder=group("decoder", DecoderParams),
        projection=group("projection", ProjectionParams),
    )
    meta = header.get("optimizer")
    if meta:
        flat: dict[str, Tensor] = {}
        for g_name in header["groups"]:
            grp = getattr(ckpt, {"encoder": "encoder", "decoder": "decoder",
                                 "projection": "projection"}[g_name])
            for name, tensor in grp.items():
                flat[f"{g_name}.{name}"] = tensor
        opt = AdamOptimizer({k: flat[k] for k in meta["params"]}, lr=meta["lr"],
                            warmup=meta["warmup"], beta1=meta["beta1"], beta2=meta["beta2"],
                            eps=meta["eps"], clip_norm=meta["clip_norm"])
        opt.step_count = meta["step_count"]
        for k in meta["params"]:
            opt.m[k] = arrays[f"opt.m.{k}"].astype(dtype)
            opt.v[k] = arrays[f"opt.v.{k}"].astype(dtype)
        ckpt.optimizer = opt
    return ckpt


def _flatten(groups: dict[str, ParamGroup | None]) -> dict[str, Tensor]:
    flat: dict[str, Tensor] = {}
    for g_name, group in groups.items():
        if group is None:
            continue
        for name, tensor in group.items():
            flat[f"{g_name}.{name}"] = tensor
    return flat


# -- configs ---------------------------------------------------------------------


@dataclass(frozen=True)
class CEConfig:
    lam: float = 5e-3
    epochs: int = 50
    batch_size: int = 64
    pooling: str = "mean"
    proj_dim: int = 32

    def __post_init__(self):
        # lam = 0 is permitted as a diagnostic edge (redundancy term inert).
        if self.lam < 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not 1 <= self.epochs <= 1000:
            raise ConfigError(f"epochs must be in [1, 1000], got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"CE batch size must be >= 2, got {self.batch_size}")
        if self.pooling not in M.POOLING_KINDS:
            raise ConfigError(f"pooling must be one of {M.POOLING_KINDS}")
        if self.proj_dim < 1:
            raise ConfigError(f"proj_dim must be >= 1, got {self.proj_dim}")


# -- stage loops -------------------------------------------------------------------


def _translation_steps(cfg: ModelConfig, corpus: ParallelCorpus, vocab_src: Vocabulary,
                       vocab_tgt: Vocabulary, enc: EncoderParams, dec: DecoderParams,
                       seed: int, steps: int, batch_size: int, lr: float, warmup: int,
                       stage: str, metrics: MetricsLog | None,
                       out_dir: Path | None) -> int:
    if len(corpus) == 0:
        raise ConfigError("cannot train on an empty corpus")
    optimizer = AdamOptimizer(_flatten({"encoder": enc, "decoder": dec}), lr=lr, warmup=warmup)
    dropout_rng = np.random.default_rng(seed + 7919) if cfg.dropout > 0 else None
    step = 0
    epoch = 0
    while step < steps:
        for batch in batch_iter(corpus, vocab_src, vocab_tgt, batch_size,
                                max_len=cfg.max_len, shuffle=True, seed=seed + 1000 + epoch):
            if step >= steps:
                break
            try:
                latent = M.encode(batch.source_ids, batch.source_mask, enc, cfg, rng=dropout_rng)
                logits = M.decode(latent, batch.target_ids[:, :-1], batch.target_mask[:, :-1],
                                  dec, cfg, rng=dropout_rng)
                loss = translation_loss(logits, batch.target_ids[:, 1:], batch.target_mask[:, 1:])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                diag_path = None
                if out_dir is not None:
                    diag = Checkpoint(cfg, stage, seed, step, enc, decoder=dec)
                    diag_path = save_checkpoint(diag, Path(out_dir) / f"diverged-{step}.ckpt")
                raise DivergenceError(f"{stage} diverged at step {step}: {exc}",
                                      checkpoint_path=diag_path) from exc
            step += 1
            if metrics is not None:
                metrics.write(stage, step, loss.item())
        epoch += 1
    return step


def train_translation(cfg: ModelConfig, corpus: ParallelCorpus, vocab_src: Vocabulary,
                      vocab_tgt: Vocabulary, seed: int, steps: int, *,
                      batch_size: int = 32, lr: float = 1e-3, warmup: int = 4000,
                      dtype=np.float64, metrics: MetricsLog | None = None,
                      out_dir=None, embed_table: np.ndarray | None = None) -> Checkpoint:
    """Stage 1: train encoder + decoder on translation cross-entropy.

    With ``steps=0`` the returned parameters equal the seeded initialization.
    ``embed_table`` (src_vocab x emb_dim) overrides the encoder embedding init.
    """
    rng = np.random.default_rng(seed)
    enc = M.init_encoder_params(cfg, rng, dtype=dtype, embed_table=embed_table)
    dec = M.init_decoder_params(cfg, rng, dtype=dtype)
    step = 0
    if steps > 0:
        step = _translation_steps(cfg, corpus, vocab_src, vocab_tgt, enc, dec, seed,
                                  steps, batch_size, lr, warmup, "pretrain", metrics,
                                  Path(out_dir) if out_dir else None)
    return Checkpoint(cfg, "pretrain", seed, step, enc, decoder=dec)


def context_enhance(start: Checkpoint, corpus: ParallelCorpus, vocab_enc: Vocabulary,
                    ce_cfg: CEConfig, seed: int, *, lr: float = 1e-3, warmup: int = 100,
                    metrics: MetricsLog | None = None, out_dir=None,
                    history: list | None = None,
                    monitor: CollapseMonitor | None = None) -> Checkpoint:
    """Stage 2: align pooled parallel-sentence embeddings with Barlow Twins.

    Both sides of every pair pass through the one shared encoder (ids under
    the encoder vocabulary), then pooling, projection, batch norm, and the
    loss. Only encoder and projection parameters are updated; any decoder in
    ``start`` is carried through untouched. Batches smaller than 2 rows are
    skipped (batch norm needs statistics). ``history``, when supplied, gets
    one dict per epoch with the mean loss terms and the last correlation
    snapshot.

    The stage aborts with ``CollapseError`` once the monitor reports collapse
    for ``COLLAPSE_PATIENCE`` consecutive batches.
    """
    if start.encoder is None:
        raise ConfigError("context enhancement requires encoder parameters")
    cfg = start.config.with_ce(ce_cfg.proj_dim, ce_cfg.pooling)
    enc = start.encoder.copy()
    dec = start.decoder.copy() if start.decoder is not None else None
    proj = M.init_projection_params(cfg, np.random.default_rng(seed),
                                    dtype=enc["embed"].dtype)
    optimizer = AdamOptimizer(_flatten({"encoder": enc, "projection": proj}),
                              lr=lr, warmup=warmup)
    monitor = monitor or CollapseMonitor()
    out_dir = Path(out_dir) if out_dir else None
    collapsed_streak = 0

    for epoch in range(ce_cfg.epochs):
        totals = np.zeros(3)
        batches = 0
        last_corr = None
        for batch in batch_iter(corpus, vocab_enc, vocab_enc, ce_cfg.batch_size,
                                max_len=cfg.max_len, shuffle=True, seed=seed + 1000 + epoch):
            if batch.size < 2:
                continue
            lat_s = M.encode(batch.source_ids, batch.source_mask, enc, cfg)
            lat_t = M.encode(batch.target_ids, batch.target_mask, enc, cfg)
            sig_s = M.pool(lat_s, ce_cfg.pooling)
            sig_t = M.pool(lat_t, ce_cfg.pooling)
            z_s = M.project(sig_s, proj)
            z_t = M.project(sig_t, proj)
            breakdown = barlow_twins_loss(z_s, z_t, lam=ce_cfg.lam)
            optimizer.zero_grad()
            breakdown.loss.backward()
            optimizer.step()
            totals += (breakdown.total, breakdown.invariance_term, breakdown.redundancy_term)
            batches += 1
            last_corr = breakdown.correlation.values
            report = monitor.observe(np.vstack([sig_s.values.values, sig_t.values.values]))
            collapsed_streak = collapsed_streak + 1 if report.status == "collapsed" else 0
            if collapsed_streak >= COLLAPSE_PATIENCE:
                if out_dir is not None:
                    diag = Checkpoint(cfg, "ce", seed, epoch, enc, decoder=dec, projection=proj)
                    save_checkpoint(diag, out_dir / f"collapsed-{epoch}.ckpt")
                raise CollapseError(report)
        if batches == 0:
            raise ConfigError("context enhancement saw no usable batch (all smaller than 2)")
        mean_total, mean_inv, mean_red = (totals / batches).tolist()
        if metrics is not None:
            metrics.write("ce", epoch, mean_total, mean_inv, mean_red, ce_cfg.lam)
        if history is not None:
            history.append({
                "epoch": epoch, "total": mean_total, "invariance": mean_inv,
                "redundancy": mean_red, "correlation": last_corr,
            })
    return Checkpoint(cfg, "ce", seed, ce_cfg.epochs, enc, decoder=dec, projection=proj)


def finetune_translation(ce_ckpt: Checkpoint, corpus: ParallelCorpus, vocab_src: Vocabulary,
                         vocab_tgt: Vocabulary, steps: int, seed: int, *,
                         batch_size: int = 32, lr: float = 1e-3, warmup: int = 4000,
                         reuse_decoder: bool = False, metrics: MetricsLog | None = None,
                         out_dir=None) -> Checkpoint:
    """Stage 3: joint translation training from the enhanced encoder.

    The decoder starts fresh by default; ``reuse_decoder`` picks up the
    decoder carried inside the CE checkpoint instead. Pooling, projection and
    batch norm never execute on this path; the projection parameters are
    retained in the result untouched.
    """
    if ce_ckpt.stage != "ce":
        raise ConfigError(f"fine-tuning requires a ce checkpoint, got stage {ce_ckpt.stage!r}")
    cfg = ce_ckpt.config
    enc = ce_ckpt.encoder.copy()
    if reuse_decoder:
        if ce_ckpt.decoder is None:
            raise ConfigError("reuse_decoder requested but the ce checkpoint has no decoder")
        dec = ce_ckpt.decoder.copy()
    else:
        dec = M.init_decoder_params(cfg, np.random.default_rng(seed), dtype=enc["embed"].dtype)
    step = 0
    if steps > 0:
        step = _translation_steps(cfg, corpus, vocab_src, vocab_tgt, enc, dec, seed,
                                  steps, batch_size, lr, warmup, "finetune", metrics,
                                  Path(out_dir) if out_dir else None)
    proj = ce_ckpt.projection.copy() if ce_ckpt.projection is not None else None
    return Checkpoint(cfg, "finetune", seed, step, enc, decoder=dec, projection=proj)


# -- pipeline -------------------------------------------------------------------------


@dataclass
class PipelineResult:
    checkpoints: dict[str, Checkpoint]
    paths: dict[str, Path]
    metrics_path: Path
    ce_history: list


def run_pipeline(cfg: ModelConfig, ce_cfg: CEConfig, corpus: ParallelCorpus,
                 vocab_src: Vocabulary, vocab_tgt: Vocabulary, seed: int, out_dir, *,
                 steps: int = 1000, finetune_steps: int | None = None,
                 batch_size: int = 32, lr: float = 1e-3, warmup: int = 400,
                 skip_pretrain: bool = False, reuse_decoder: bool = False,
                 embed_table: np.ndarray | None = None, dtype=np.float64,
                 record_time: bool | None = None) -> PipelineResult:
    """Run pretrain -> ce -> finetune, persisting checkpoints and metrics.

    ``skip_pretrain`` starts CE directly from a fresh encoder (optionally
    seeded with ``embed_table``), emitting only the ce and finetune
    checkpoints. Stage errors propagate after earlier checkpoints are safely
    on disk. Timing defaults to on for float32 runs and off for float64 runs
    (the reproducibility mode).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if record_time is None:
        record_time = np.dtype(dtype) == np.float32
    if finetune_steps is None:
        finetune_steps = steps
    metrics = MetricsLog(out_dir / "metrics.jsonl", record_time=record_time)
    checkpoints: dict[str, Checkpoint] = {}
    paths: dict[str, Path] = {}

    if skip_pretrain:
        rng = np.random.default_rng(seed)
        enc = M.init_encoder_params(cfg, rng, dtype=dtype, embed_table=embed_table)
        start = Checkpoint(cfg, "ce", seed, 0, enc,
                           projection=M.init_projection_params(cfg, rng, dtype=dtype))
    else:
        start = train_translation(cfg, corpus, vocab_src, vocab_tgt, seed, steps,
                                  batch_size=batch_size, lr=lr, warmup=warmup, dtype=dtype,
                                  metrics=metrics, out_dir=out_dir, embed_table=embed_table)
        checkpoints["pretrain"] = start
        paths["pretrain"] = save_checkpoint(start, out_dir / f"pretrain-{start.step}.ckpt")

    ce_history: list = []
    ce_ckpt = context_enhance(start, corpus, vocab_src, ce_cfg, seed + 1, lr=lr,
                              warmup=max(1, warmup // 4), metrics=metrics, out_dir=out_dir,
                              history=ce_history)
    checkpoints["ce"] = ce_ckpt
    paths["ce"] = save_checkpoint(ce_ckpt, out_dir / f"ce-{ce_ckpt.step}.ckpt")

    ft_ckpt = finetune_translation(ce_ckpt, corpus, vocab_src, vocab_tgt, finetune_steps,
                                   seed + 2, batch_size=batch_size, lr=lr, warmup=warmup,
                                   reuse_decoder=reuse_decoder, metrics=metrics, out_dir=out_dir)
    checkpoints["finetune"] = ft_ckpt
    paths["finetune"] = save_checkpoint(ft_ckpt, out_dir / f"finetune-{ft_ckpt.step}.ckpt")
    return PipelineResult(checkpoints, paths, metrics.path, ce_history)
