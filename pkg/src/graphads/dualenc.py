"""Dual text encoders: two small pre-norm transformers with pooling.

Query and ad texts are encoded by separate towers into fixed-length
embeddings.  Towers can optionally share weights.  The forward path is
written over batches so a whole node set can be encoded in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ConfigError, DomainError, ShapeError
from .numkit import ops
from .textpipe import TextPipeline, encode_text

MASK_LOGIT = -1e30  # exp underflows to exactly 0, so PAD keys get weight 0

POOL_MEAN = "MEAN"
POOL_CLS = "CLS"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    max_len: int = 16
    pooling: str = POOL_MEAN
    tie_encoders: bool = False


def check_config(config: EncoderConfig) -> None:
    if config.vocab_size < 4:
        raise ConfigError(f"vocab_size must cover the 4 reserved ids, "
                          f"got {config.vocab_size}")
    if config.d_model <= 0 or config.n_heads <= 0 or config.d_ff <= 0:
        raise ConfigError("d_model, n_heads and d_ff must be positive")
    if config.d_model % config.n_heads != 0:
        raise ConfigError(f"d_model={config.d_model} not divisible by "
                          f"n_heads={config.n_heads}")
    if config.n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {config.n_layers}")
    if config.max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {config.max_len}")
    if config.pooling not in (POOL_MEAN, POOL_CLS):
        raise ConfigError(f"unknown pooling mode {config.pooling!r}")


def init_encoder(config: EncoderConfig, seed: int,
                 std: float = 0.02) -> dict[str, nk.Tensor]:
    """Gaussian(0, std) weights, identity layer norms; one draw order per seed."""
    check_config(config)
    rng = nk.seeded_rng(seed)
    d, ff = config.d_model, config.d_ff

    def gauss(name: str, shape) -> nk.Tensor:
        return nk.gaussian_init(rng, shape, std, name=name)

    def ones(name: str) -> nk.Tensor:
        return nk.Tensor(np.ones(d), requires_grad=True, name=name)

    def zeros(name: str) -> nk.Tensor:
        return nk.Tensor(np.zeros(d), requires_grad=True, name=name)

    params: dict[str, nk.Tensor] = {
        "embed": gauss("embed", (config.vocab_size, d)),
        "pos": gauss("pos", (config.max_len, d)),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        params[p + "ln1.gain"] = ones(p + "ln1.gain")
        params[p + "ln1.bias"] = zeros(p + "ln1.bias")
        for w in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + w] = gauss(p + "attn." + w, (d, d))
        params[p + "ln2.gain"] = ones(p + "ln2.gain")
        params[p + "ln2.bias"] = zeros(p + "ln2.bias")
        params[p + "ff.w1"] = gauss(p + "ff.w1", (d, ff))
        params[p + "ff.w2"] = gauss(p + "ff.w2", (ff, d))
    params["ln_f.gain"] = ones("ln_f.gain")
    params["ln_f.bias"] = zeros("ln_f.bias")
    return params


def init_towers(config: EncoderConfig,
                seed: int) -> tuple[dict[str, nk.Tensor], dict[str, nk.Tensor]]:
    """Query/ad parameter dicts; one shared dict when tie_encoders is set."""
    if config.tie_encoders:
        shared = init_encoder(config, nk.derive_seed(seed, "enc_shared"))
        return shared, shared
    return (init_encoder(config, nk.derive_seed(seed, "enc_q")),
            init_encoder(config, nk.derive_seed(seed, "enc_a")))


def _check_batch(ids: np.ndarray, mask: np.ndarray,
                 config: EncoderConfig) -> None:
    if ids.shape != mask.shape:
        raise ShapeError(f"ids {ids.shape} and mask {mask.shape} differ")
    if ids.ndim != 2 or ids.shape[1] != config.max_len:
        raise ShapeError(f"expected (batch, {config.max_len}) ids, "
                         f"got {ids.shape}")


def encode_batch(ids: np.ndarray, mask: np.ndarray,
                 params: dict[str, nk.Tensor], config: EncoderConfig,
                 attn_collector: list | None = None) -> nk.Tensor:
    """Hidden states [batch, max_len, d_model] from token/mask matrices.

    Pre-norm blocks: x + Attn(LN(x)), then x + FF(LN(x)), final LN.  PAD
    keys receive an additive MASK_LOGIT before softmax.  When given,
    attn_collector receives one [batch, heads, L, L] weight array per layer.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    _check_batch(ids, mask, config)
    B, L = ids.shape
    d, H = config.d_model, config.n_heads
    dh = d // H

    x = ops.reshape(ops.take_rows(params["embed"], ids.ravel()), (B, L, d))
    x = ops.add_bcast(x, params["pos"])

    key_bias = np.where(mask == 0, MASK_LOGIT, 0.0)  # [B, L]
    bias = nk.Tensor(np.broadcast_to(
        key_bias[:, None, None, :], (B, H, L, L)).reshape(B * H, L, L).copy())

    def project(flat: nk.Tensor, w: nk.Tensor) -> nk.Tensor:
        heads = ops.reshape(ops.matmul(flat, w), (B, L, H, dh))
        return ops.reshape(ops.swap_axes(heads, 1, 2), (B * H, L, dh))

    for i in range(config.n_layers):
        p = f"layer{i}."
        h = ops.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        flat = ops.reshape(h, (B * L, d))
        q = project(flat, params[p + "attn.wq"])
        k = project(flat, params[p + "attn.wk"])
        v = project(flat, params[p + "attn.wv"])
        scores = ops.scale(ops.bmm(q, ops.swap_last2(k)), 1.0 / math.sqrt(dh))
        weights = ops.softmax(ops.add(scores, bias), axis=-1)
        if attn_collector is not None:
            attn_collector.append(weights.data.reshape(B, H, L, L).copy())
        ctx = ops.reshape(ops.swap_axes(
            ops.reshape(ops.bmm(weights, v), (B, H, L, dh)), 1, 2), (B * L, d))
        x = ops.add(x, ops.reshape(ops.matmul(ctx, params[p + "attn.wo"]),
                                   (B, L, d)))

        h2 = ops.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = ops.matmul(ops.reshape(h2, (B * L, d)), params[p + "ff.w1"])
        f = ops.matmul(ops.leaky_relu(f, slope=0.0), params[p + "ff.w2"])
        x = ops.add(x, ops.reshape(f, (B, L, d)))

    return ops.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])


def encode(ids: np.ndarray, mask: np.ndarray, params: dict[str, nk.Tensor],
           config: EncoderConfig,
           attn_collector: list | None = None) -> nk.Tensor:
    """Single-sequence wrapper: [max_len, d_model] hidden states."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    h = encode_batch(ids[None, :], mask[None, :], params, config,
                     attn_collector=attn_collector)
    return ops.reshape(h, (config.max_len, config.d_model))


def pool_batch(h: nk.Tensor, mask: np.ndarray, mode: str) -> nk.Tensor:
    """[batch, d_model] embeddings: masked mean or the CLS position."""
    mask = np.asarray(mask, dtype=np.float64)
    if h.data.ndim != 3 or mask.shape != h.shape[:2]:
        raise ShapeError(f"pool_batch: h {h.shape} vs mask {mask.shape}")
    if mode == POOL_CLS:
        return ops.index_axis1(h, 0)
    if mode != POOL_MEAN:
        raise ConfigError(f"unknown pooling mode {mode!r}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DomainError("mean pooling over a fully masked sequence")
    summed = ops.sum_axis(ops.mul_prefix(h, nk.Tensor(mask)), 1)
    return ops.mul_prefix(summed, nk.Tensor(1.0 / counts))


def pool(h: nk.Tensor, mask: np.ndarray, mode: str) -> nk.Tensor:
    """Single-sequence wrapper of pool_batch: [d_model]."""
    mask = np.asarray(mask, dtype=np.float64)
    if h.data.ndim != 2 or mask.shape != (h.shape[0],):
        raise ShapeError(f"pool: h {h.shape} vs mask {mask.shape}")
    L, d = h.shape
    z = pool_batch(ops.reshape(h, (1, L, d)), mask[None, :], mode)
    return ops.reshape(z, (d,))


def encode_texts(texts: list[str], langs: list[str], pipeline: TextPipeline,
                 params: dict[str, nk.Tensor],
                 config: EncoderConfig) -> nk.Tensor:
    """Text list straight to pooled embeddings [batch, d_model]."""
    if len(texts) != len(langs):
        raise ShapeError(f"{len(texts)} texts vs {len(langs)} langs")
    if not texts:
        raise DomainError("encode_texts: empty batch")
    pairs = [encode_text(t, lg, pipeline) for t, lg in zip(texts, langs)]
    ids = np.stack([p[0] for p in pairs])
    mask = np.stack([p[1] for p in pairs])
    h = encode_batch(ids, mask, params, config)
    return pool_batch(h, mask, config.pooling)


def encode_pair(query_text: str, query_lang: str, ad_text: str, ad_lang: str,
                pipeline: TextPipeline, params_q: dict[str, nk.Tensor],
                params_a: dict[str, nk.Tensor],
                config: EncoderConfig) -> tuple[nk.Tensor, nk.Tensor]:
    """(z_q, z_a) for one query/ad text pair, one tower each."""
    z_q = encode_texts([query_text], [query_lang], pipeline, params_q, config)
    z_a = encode_texts([ad_text], [ad_lang], pipeline, params_a, config)
    d = config.d_model
    return ops.reshape(z_q, (d,)), ops.reshape(z_a, (d,))
