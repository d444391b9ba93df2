"""Alignment objective: cosine similarity, InfoNCE with in-batch negatives,
and a translation-consistency term.

The contrastive term treats row i's ad as the positive for row i's query and
every other in-batch ad as a negative.  The translation term pulls each
refined query embedding toward the embedding of its reference translation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .numkit import ops


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0


def check_weights(weights: LossWeights) -> None:
    if not weights.tau > 0:
        raise ConfigError(f"temperature must be positive, got {weights.tau}")
    if weights.lambda1 < 0 or weights.lambda2 < 0:
        raise ConfigError("loss weights must be non-negative")
    if weights.lambda1 + weights.lambda2 == 0:
        raise ConfigError("at least one loss weight must be positive")


@dataclass
class AlignBatch:
    """Row i of z_q pairs with row i of z_a; z_ref holds reference
    translations embedded by the query tower (optional)."""

    z_q: nk.Tensor
    z_a: nk.Tensor
    z_ref: nk.Tensor | None = None


def _check_rows_nonzero(name: str, m: nk.Tensor) -> np.ndarray:
    norms = np.sqrt((m.data ** 2).sum(axis=1))
    if np.any(norms == 0):
        bad = int(np.argmin(norms))
        raise DomainError(f"{name} row {bad} is the zero vector")
    return norms


def cosine_sim(u: nk.Tensor, v: nk.Tensor) -> nk.Tensor:
    """u.v / (|u||v|); zero vectors are a hard error, not silently 0."""
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_sim: expected equal vectors, "
                         f"got {u.shape} and {v.shape}")
    if not float(np.dot(u.data, u.data)) > 0:
        raise DomainError("cosine_sim: first argument is the zero vector")
    if not float(np.dot(v.data, v.data)) > 0:
        raise DomainError("cosine_sim: second argument is the zero vector")
    dot = ops.sum_all(ops.mul(u, v))
    return ops.div(dot, ops.mul(ops.l2_norm(u), ops.l2_norm(v)))


def _normalize_rows(name: str, m: nk.Tensor) -> nk.Tensor:
    if m.data.ndim != 2:
        raise ShapeError(f"{name} must be [batch, d], got {m.shape}")
    _check_rows_nonzero(name, m)
    # the norm must stay on the tape or its gradient term is lost
    inv = ops.pow_scalar(ops.sum_axis(ops.mul(m, m), 1), -0.5)
    return ops.mul_prefix(m, inv)


def similarity_matrix(z_q: nk.Tensor, z_a: nk.Tensor) -> nk.Tensor:
    """S[i, j] = cosine between query i and ad j."""
    if z_q.shape != z_a.shape:
        raise ShapeError(f"query batch {z_q.shape} vs ad batch {z_a.shape}")
    nq = _normalize_rows("z_q", z_q)
    na = _normalize_rows("z_a", z_a)
    return ops.matmul(nq, ops.transpose(na))


def contrastive_loss(batch: AlignBatch,
                     weights: LossWeights = LossWeights()) -> nk.Tensor:
    """-(1/B) sum_i log softmax_i(S/tau)[i], stable via logsumexp."""
    check_weights(weights)
    B = batch.z_q.shape[0]
    if B < 2:
        raise ContractError(f"contrastive loss needs >= 2 rows for an "
                            f"in-batch negative, got {B}")
    scaled = ops.scale(similarity_matrix(batch.z_q, batch.z_a),
                       1.0 / weights.tau)
    per_row = ops.sub(ops.logsumexp_rows(scaled), ops.take_diag(scaled))
    return ops.mean_axis(per_row, 0)


def translation_loss(z_q: nk.Tensor, z_ref: nk.Tensor) -> nk.Tensor:
    """(1/B) sum_i (1 - cos(z_q_i, z_ref_i)); 0 iff rowwise colinear."""
    if z_q.shape != z_ref.shape:
        raise ShapeError(f"z_q {z_q.shape} vs z_ref {z_ref.shape}")
    nq = _normalize_rows("z_q", z_q)
    nr = _normalize_rows("z_ref", z_ref)
    cos_rows = ops.sum_axis(ops.mul(nq, nr), 1)
    ones = nk.Tensor(np.ones(z_q.shape[0]))
    return ops.mean_axis(ops.sub(ones, cos_rows), 0)


def total_loss(batch: AlignBatch,
               weights: LossWeights = LossWeights()
               ) -> tuple[nk.Tensor, dict[str, float]]:
    """lambda1 * contrastive + lambda2 * translation, plus per-term floats."""
    check_weights(weights)
    contr = contrastive_loss(batch, weights)
    parts = {"contrastive": float(contr.item())}
    total = ops.scale(contr, weights.lambda1)
    if weights.lambda2 > 0:
        if batch.z_ref is None:
            raise ContractError("lambda2 > 0 requires reference translation "
                                "embeddings in the batch")
        trans = translation_loss(batch.z_q, batch.z_ref)
        parts["translation"] = float(trans.item())
        total = ops.add(total, ops.scale(trans, weights.lambda2))
    else:
        parts["translation"] = 0.0
    parts["total"] = float(total.item())
    return total, parts
