"""Transformer encoder-decoder, mask-aware pooling, and the projection network.

Architecture choices fixed here:
  - pre-layer-norm blocks with a final layer norm after each stack,
  - sinusoidal (non-learned) positional encodings,
  - padding-masked (bidirectional) self-attention in the encoder,
    causal + padding-masked self-attention and padding-masked
    cross-attention in the decoder,
  - token embeddings of width ``emb_dim`` mapped into the model width by a
    learned input projection, scaled by sqrt(dim) before positions are added.

All forward passes are deterministic functions of (parameters, inputs) when
dropout is disabled. Masked positions carry exactly zero attention weight,
so any change confined to padding leaves unmasked outputs bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import numerics as N
from .data import BOS
from .errors import ConfigError
from .numerics import Tensor

POOLING_KINDS = ("mean", "max")


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    depth: int = 2
    dim: int = 64
    heads: int = 4
    ff_dim: int = 0          # 0 means the 4*dim default
    proj_dim: int = 32
    pooling: str = "mean"
    emb_dim: int = 64
    dropout: float = 0.0
    max_len: int = 64

    def __post_init__(self):
        if self.ff_dim == 0:
            object.__setattr__(self, "ff_dim", 4 * self.dim)
        if self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ConfigError("vocab sizes must exceed the 4 reserved ids")
        if not 1 <= self.depth <= 24:
            raise ConfigError(f"depth must be in [1, 24], got {self.depth}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.proj_dim < 1:
            raise ConfigError(f"proj_dim must be >= 1, got {self.proj_dim}")
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"pooling must be one of {POOLING_KINDS}, got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        if self.emb_dim < 1 or self.ff_dim < 1:
            raise ConfigError("emb_dim and ff_dim must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_ce(self, proj_dim: int, pooling: str) -> "ModelConfig":
        return replace(self, proj_dim=proj_dim, pooling=pooling)


class ParamGroup:
    """Named parameter tensors in a fixed construction order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ParamGroup":
        dup = type(self)({k: Tensor(v.values.copy(), requires_grad=True)
                          for k, v in self.tensors.items()})
        return dup

    def allclose(self, other: "ParamGroup", exact: bool = True) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.array_equal(a.values, other.tensors[k].values) if exact
            else np.allclose(a.values, other.tensors[k].values)
            for k, a in self.tensors.items()
        )


class EncoderParams(ParamGroup):
    pass


class DecoderParams(ParamGroup):
    pass


class ProjectionParams(ParamGroup):
    pass


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _attn_weights(rng, h, dtype, out: dict, prefix: str) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = _param(_glorot(rng, h, h, dtype))


def _ln_weights(h, dtype, out: dict, prefix: str) -> None:
    out[f"{prefix}_g"] = _param(np.ones(h, dtype=dtype))
    out[f"{prefix}_b"] = _param(np.zeros(h, dtype=dtype))


def _ff_weights(rng, h, ff, dtype, out: dict, prefix: str) -> None:
    out[f"{prefix}.w1"] = _param(_glorot(rng, h, ff, dtype))
    out[f"{prefix}.b1"] = _param(np.zeros(ff, dtype=dtype))
    out[f"{prefix}.w2"] = _param(_glorot(rng, ff, h, dtype))
    out[f"{prefix}.b2"] = _param(np.zeros(h, dtype=dtype))


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator,
                        dtype=np.float64, embed_table: np.ndarray | None = None) -> EncoderParams:
    """Fresh encoder parameters; ``embed_table`` overrides the embedding init."""
    t: dict[str, Tensor] = {}
    if embed_table is not None:
        if embed_table.shape != (cfg.src_vocab, cfg.emb_dim):
            raise ConfigError(
                f"embedding table shape {embed_table.shape} does not match "
                f"(src_vocab, emb_dim)=({cfg.src_vocab}, {cfg.emb_dim})"
            )
        t["embed"] = _param(embed_table.astype(dtype))
    else:
        t["embed"] = _param(rng.normal(0.0, cfg.emb_dim ** -0.5,
                                       size=(cfg.src_vocab, cfg.emb_dim)).astype(dtype))
    t["in_w"] = _param(_glorot(rng, cfg.emb_dim, cfg.dim, dtype))
    t["in_b"] = _param(np.zeros(cfg.dim, dtype=dtype))
    for i in range(cfg.depth):
        _ln_weights(cfg.dim, dtype, t, f"layer{i}.ln1")
        _attn_weights(rng, cfg.dim, dtype, t, f"layer{i}.attn")
        _ln_weights(cfg.dim, dtype, t, f"layer{i}.ln2")
        _ff_weights(rng, cfg.dim, cfg.ff_dim, dtype, t, f"layer{i}.ff")
    _ln_weights(cfg.dim, dtype, t, "final_ln")
    return EncoderParams(t)


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator,
                        dtype=np.float64) -> DecoderParams:
    t: dict[str, Tensor] = {}
    t["embed"] = _param(rng.normal(0.0, cfg.emb_dim ** -0.5,
                                   size=(cfg.tgt_vocab, cfg.emb_dim)).astype(dtype))
    t["in_w"] = _param(_glorot(rng, cfg.emb_dim, cfg.dim, dtype))
    t["in_b"] = _param(np.zeros(cfg.dim, dtype=dtype))
    for i in range(cfg.depth):
        _ln_weights(cfg.dim, dtype, t, f"layer{i}.ln1")
        _attn_weights(rng, cfg.dim, dtype, t, f"layer{i}.self")
        _ln_weights(cfg.dim, dtype, t, f"layer{i}.ln2")
        _attn_weights(rng, cfg.dim, dtype, t, f"layer{i}.cross")
        _ln_weights(cfg.dim, dtype, t, f"layer{i}.ln3")
        _ff_weights(rng, cfg.dim, cfg.ff_dim, dtype, t, f"layer{i}.ff")
    _ln_weights(cfg.dim, dtype, t, "final_ln")
    t["out_w"] = _param(_glorot(rng, cfg.dim, cfg.tgt_vocab, dtype))
    t["out_b"] = _param(np.zeros(cfg.tgt_vocab, dtype=dtype))
    return DecoderParams(t)


def init_projection_params(cfg: ModelConfig, rng: np.random.Generator,
                           dtype=np.float64) -> ProjectionParams:
    h, d = cfg.dim, cfg.proj_dim
    t: dict[str, Tensor] = {
        "w1": _param(_glorot(rng, h, d, dtype)),
        "b1": _param(np.zeros(d, dtype=dtype)),
        "w2": _param(_glorot(rng, d, d, dtype)),
        "b2": _param(np.zeros(d, dtype=dtype)),
        "w3": _param(_glorot(rng, d, d, dtype)),
        "b3": _param(np.zeros(d, dtype=dtype)),
    }
    return ProjectionParams(t)


# -- representation records ------------------------------------------------------


@dataclass
class LatentSequence:
    """Per-token latent states (B, t, dim) with their validity mask (B, t)."""

    values: Tensor
    mask: np.ndarray


@dataclass
class SentenceEmbedding:
    """Pooled sentence vectors (B, dim)."""

    values: Tensor


# -- building blocks ---------------------------------------------------------------


def sinusoidal_positions(t: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(t, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * np.floor(idx / 2.0)) / dim)
    pe = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(dtype)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    flat = x.reshape((-1, x.shape[-1])) if len(x.shape) != 2 else x
    out = N.matmul(flat, w)
    if b is not None:
        out = out + b
    if len(lead) != 1:
        out = out.reshape((*lead, w.shape[1]))
    return out


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * (keep / (1.0 - rate))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray,
              num_heads: int, capture: list | None = None) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` heads.

    q: (B, tq, h), k/v: (B, tk, h); h must divide evenly into heads.
    ``mask`` is boolean, (B, tk) for key padding or (B, tq, tk) for a full
    pattern; masked keys get exactly zero weight. When ``capture`` is given,
    the per-head weight array (B, heads, tq, tk) is appended to it.
    """
    B, tq, h = q.shape
    tk = k.shape[1]
    if h % num_heads != 0:
        raise ConfigError(f"model dim {h} not divisible by {num_heads} heads")
    hd = h // num_heads

    def split(x: Tensor, t: int) -> Tensor:
        return x.reshape((B, t, num_heads, hd)).transpose(0, 2, 1, 3).reshape((B * num_heads, t, hd))

    q3, k3, v3 = split(q, tq), split(k, tk), split(v, tk)
    scores = N.matmul(q3, k3.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[:, None, :]
    full = np.broadcast_to(mask[:, None, :, :], (B, num_heads, tq, tk)).reshape(B * num_heads, tq, tk)
    weights = N.masked_softmax(scores, full, axis=-1)
    if capture is not None:
        capture.append(weights.values.reshape(B, num_heads, tq, tk).copy())
    merged = N.matmul(weights, v3)
    return merged.reshape((B, num_heads, tq, hd)).transpose(0, 2, 1, 3).reshape((B, tq, h))


def _mha_layer(x_q: Tensor, x_kv: Tensor, params: ParamGroup, prefix: str,
               mask: np.ndarray, cfg: ModelConfig, capture: list | None) -> Tensor:
    q = _linear(x_q, params[f"{prefix}.wq"])
    k = _linear(x_kv, params[f"{prefix}.wk"])
    v = _linear(x_kv, params[f"{prefix}.wv"])
    out = attention(q, k, v, mask, cfg.heads, capture)
    return _linear(out, params[f"{prefix}.wo"])


def _ff(x: Tensor, params: ParamGroup, prefix: str) -> Tensor:
    hidden = N.relu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(x: Tensor, params: ParamGroup, prefix: str) -> Tensor:
    return N.layer_norm(x, params[f"{prefix}_g"], params[f"{prefix}_b"])


def _embed_inputs(ids: np.ndarray, params: ParamGroup, cfg: ModelConfig,
                  rng: np.random.Generator | None) -> Tensor:
    emb = N.embedding_lookup(params["embed"], ids)
    x = _linear(emb, params["in_w"], params["in_b"]) * math.sqrt(cfg.dim)
    pe = sinusoidal_positions(ids.shape[1], cfg.dim, dtype=x.dtype)
    x = x + pe[None, :, :]
    return _dropout(x, cfg.dropout, rng)


def encode(src_ids: np.ndarray, src_mask: np.ndarray, params: EncoderParams,
           cfg: ModelConfig, rng: np.random.Generator | None = None,
           capture: list | None = None) -> LatentSequence:
    """Map source token ids (B, t) to latent states (B, t, dim).

    Self-attention is padding-masked only: every unmasked position sees every
    other unmasked position.
    """
    src_ids = np.asarray(src_ids)
    src_mask = np.asarray(src_mask, dtype=bool)
    if src_ids.shape != src_mask.shape or src_ids.ndim != 2:
        raise ConfigError(f"ids shape {src_ids.shape} and mask shape {src_mask.shape} must match (B, t)")
    if src_ids.shape[1] > cfg.max_len:
        raise ConfigError(f"sequence length {src_ids.shape[1]} exceeds max_len {cfg.max_len}")
    x = _embed_inputs(src_ids, params, cfg, rng)
    for i in range(cfg.depth):
        y = _ln(x, params, f"layer{i}.ln1")
        attn_out = _mha_layer(y, y, params, f"layer{i}.attn", src_mask, cfg, capture)
        x = x + _dropout(attn_out, cfg.dropout, rng)
        ff_out = _ff(_ln(x, params, f"layer{i}.ln2"), params, f"layer{i}.ff")
        x = x + _dropout(ff_out, cfg.dropout, rng)
    return LatentSequence(_ln(x, params, "final_ln"), src_mask)


def decode(latent: LatentSequence, tgt_ids: np.ndarray, tgt_mask: np.ndarray,
           params: DecoderParams, cfg: ModelConfig,
           rng: np.random.Generator | None = None,
           self_capture: list | None = None,
           cross_capture: list | None = None) -> Tensor:
    """Causal decoding of a target prefix against an encoded source.

    Returns logits (B, t2, tgt_vocab). Logits at position j depend only on
    target positions <= j and on unmasked source positions.
    """
    tgt_ids = np.asarray(tgt_ids)
    tgt_mask = np.asarray(tgt_mask, dtype=bool)
    if tgt_ids.shape != tgt_mask.shape or tgt_ids.ndim != 2:
        raise ConfigError(f"ids shape {tgt_ids.shape} and mask shape {tgt_mask.shape} must match (B, t)")
    if tgt_ids.shape[0] != latent.values.shape[0]:
        raise ConfigError(
            f"batch mismatch: latent has {latent.values.shape[0]} rows, target has {tgt_ids.shape[0]}"
        )
    if (tgt_ids[:, 0] != BOS).any():
        raise ConfigError("target prefix must begin with BOS")
    B, t2 = tgt_ids.shape
    causal = np.tril(np.ones((t2, t2), dtype=bool))
    self_mask = causal[None, :, :] & tgt_mask[:, None, :]
    x = _embed_inputs(tgt_ids, params, cfg, rng)
    for i in range(cfg.depth):
        y = _ln(x, params, f"layer{i}.ln1")
        x = x + _dropout(_mha_layer(y, y, params, f"layer{i}.self", self_mask, cfg, self_capture),
                         cfg.dropout, rng)
        y = _ln(x, params, f"layer{i}.ln2")
        cross = _mha_layer(y, latent.values, params, f"layer{i}.cross", latent.mask, cfg,
                           cross_capture)
        x = x + _dropout(cross, cfg.dropout, rng)
        x = x + _dropout(_ff(_ln(x, params, f"layer{i}.ln3"), params, f"layer{i}.ff"), cfg.dropout, rng)
    x = _ln(x, params, "final_ln")
    return _linear(x, params["out_w"], params["out_b"])


def pool(latent: LatentSequence, kind: str) -> SentenceEmbedding:
    """Aggregate unmasked latent states into one vector per sentence."""
    if kind == "mean":
        return SentenceEmbedding(N.masked_mean_pool(latent.values, latent.mask))
    if kind == "max":
        return SentenceEmbedding(N.masked_max_pool(latent.values, latent.mask))
    raise ConfigError(f"pooling must be one of {POOLING_KINDS}, got {kind!r}")


def project(sigma: SentenceEmbedding, params: ProjectionParams) -> Tensor:
    """Three linear layers; the first two are batch-normalized and rectified.

    The final layer is bare: the loss pipeline applies its own batch norm.
    """
    x = sigma.values
    x = N.relu(N.batch_norm_train(_linear(x, params["w1"], params["b1"])))
    x = N.relu(N.batch_norm_train(_linear(x, params["w2"], params["b2"])))
    return _linear(x, params["w3"], params["b3"])
