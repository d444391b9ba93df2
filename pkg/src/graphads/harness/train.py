"""Seeded training loop with validation-based early stopping.

Every batch takes a text step: encoder pairs pushed through the same
embedding rule inference uses (including the context-refinement step for
the full model).  The full model adds a graph step on alternate batches:
propagation over the full train graph (desk scale makes that exact and
affordable) with the contrastive loss on refined node rows and the
encoder-produced seed rows frozen.  The freeze matters: a train query's
node aggregates its own clicked ads, so the transductive loss can be
driven down through that shortcut, and letting its gradient reach the
shared towers degrades the text path that unseen queries depend on.
Validation embeds with the inference rules and scores batches built with
distinct ads, since click multiplicity would otherwise floor an in-batch
loss at the duplicate-positive level regardless of embedding quality.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass

import numpy as np

from .. import numkit as nk
from ..align import total_loss
from ..errors import ConfigError, NumericError, ParseError
from ..synthgen import Dataset, load_dataset
from .config import (ARM_ENCODER_ONLY, ARM_FULL, RunConfig, loss_weights,
                     serialize_config)
from .data import split_hash
from .model import (NAME_USERS, PREFIX_GAT, ModelState, batch_tensors,
                    embed_ads_np, embed_events_np, embed_texts_np,
                    inference_table, init_state, refined_table)

TRACE_HEADER = "epoch,train_loss,val_loss,contrastive,translation,seconds"
CHECKPOINT_NAME = "model.ckpt"
TRACE_NAME = "trace.csv"
CONFIG_NAME = "config.txt"


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    train_loss: float
    val_loss: float
    contrastive: float
    translation: float
    seconds: float


@dataclass
class TrainResult:
    state: ModelState
    trace: tuple[TraceRow, ...]
    best_epoch: int
    best_val_loss: float
    split_digest: str
    out_dir: str | None = None


def _batches(indices, batch_size: int):
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        if len(chunk) >= 2:  # contrastive loss needs in-batch negatives
            yield chunk


def _diagnose_nonfinite(state: ModelState, loss: nk.Tensor,
                        epoch: int) -> NumericError:
    named = [("loss", loss)] + sorted(state.params.items())
    bad = nk.first_nonfinite(named) or "loss"
    return NumericError(f"non-finite loss in epoch {epoch}; first bad "
                        f"tensor: {bad}")


def _unit_rows(m: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return m / np.linalg.norm(m, axis=1, keepdims=True)


def _build_optimizers(state: ModelState, config: RunConfig):
    """(text optimizer, graph optimizer) over disjoint parameter sets.

    The full model's graph steps own the propagation stack and user
    embeddings; everything else (towers, refinement layer) belongs to the
    text steps.  Other arms put all parameters behind the first slot.
    """
    kwargs = dict(lr=config.lr, beta1=0.9, beta2=0.999,
                  weight_decay=config.weight_decay)
    if config.arm != ARM_FULL:
        return nk.AdamW(state.params, **kwargs), None
    refine_prefix = f"{PREFIX_GAT}layer{config.gat_layers}."
    graph_names = {name for name in state.params
                   if name == NAME_USERS
                   or (name.startswith(PREFIX_GAT)
                       and not name.startswith(refine_prefix))}
    text = {n: t for n, t in state.params.items() if n not in graph_names}
    graph = {n: t for n, t in state.params.items() if n in graph_names}
    return nk.AdamW(text, **kwargs), nk.AdamW(graph, **kwargs)


def _distinct_ad_batches(pairs, batch_size: int) -> list[list[int]]:
    """Deterministic batches in which no ad appears twice.

    Repeated passes over the leftover pairs; a final run of copies of a
    single ad cannot form a scoreable batch and is dropped.
    """
    remaining = list(range(len(pairs)))
    batches: list[list[int]] = []
    while remaining:
        batch, ads, rest = [], set(), []
        for i in remaining:
            if len(batch) < batch_size and pairs[i].ad_id not in ads:
                batch.append(i)
                ads.add(pairs[i].ad_id)
            else:
                rest.append(i)
        if len(batch) < 2:
            break
        batches.append(batch)
        remaining = rest
    return batches


def validation_loss(state: ModelState, weights) -> float:
    """Held-out loss under the inference embedding rules.

    In-batch contrastive scoring over a fixed shuffle of the split,
    batched so no ad repeats: click multiplicity would otherwise plant
    duplicate positives in a batch and floor the loss no matter how good
    the embeddings are, and unshuffled event order would fill batches
    with same-session pairs whose ads are all hard negatives.
    """
    order = nk.component_rng(state.config.seed, "val-batches",
                             0).permutation(len(state.split.val))
    pairs = [state.pairs[state.split.val[int(i)]] for i in order]
    if not pairs:
        raise ConfigError("validation split has no pairs")
    batches = _distinct_ad_batches(pairs, state.config.batch_size)
    if not batches:
        raise ConfigError("validation pairs cannot form a contrastive "
                          "batch of distinct ads")
    table = inference_table(state)
    zq = _unit_rows(embed_events_np(
        state, [p.event_index for p in pairs], table))
    za = _unit_rows(embed_ads_np(state, [p.ad_id for p in pairs], table))

    total, n = 0.0, 0
    for batch in batches:
        scores = (zq[batch] @ za[batch].T) / weights.tau
        peak = scores.max(axis=1, keepdims=True)
        lse = peak[:, 0] + np.log(np.exp(scores - peak).sum(axis=1))
        pos = np.diag(scores)
        total += weights.lambda1 * float(np.sum(lse - pos))
        n += len(batch)
    total /= n

    if weights.lambda2 > 0:
        zr = _unit_rows(embed_texts_np(
            state, [p.translation for p in pairs],
            [p.translation_lang for p in pairs], "q"))
        cos = (zq * zr).sum(axis=1)
        total += weights.lambda2 * float(np.mean(1.0 - cos))
    return total


def train(config: RunConfig, dataset: Dataset | None = None,
          out_dir: str | None = None) -> TrainResult:
    if dataset is None:
        dataset = load_dataset(config.data_dir)
    state = init_state(config, dataset)
    if len(state.split.train) < 2:
        raise ConfigError(f"train split has {len(state.split.train)} "
                          f"pairs; need at least 2")
    weights = loss_weights(config)
    graph_weights = dataclasses.replace(weights, lambda2=0.0)
    opt_text, opt_graph = _build_optimizers(state, config)

    trace: list[TraceRow] = []
    best_val = float("inf")
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    bad_epochs = 0
    last_table: np.ndarray | None = None

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = nk.component_rng(config.seed, "shuffle",
                                epoch).permutation(len(state.split.train))
        order = [state.split.train[int(i)] for i in perm]

        sums = {"total": 0.0, "contrastive": 0.0, "translation": 0.0}
        seen = 0
        for index, chunk in enumerate(_batches(order, config.batch_size)):
            batch = [state.pairs[i] for i in chunk]
            # (table, use_text, step weights, optimizer) per step; the
            # full model interleaves a graph step on alternate batches
            steps: list[tuple] = []
            if config.arm == ARM_FULL:
                if index % 2 == 0 and weights.lambda1 > 0:
                    graph_table = refined_table(state, detach_text=True)
                    last_table = graph_table.data
                    steps.append((graph_table, False, graph_weights,
                                  opt_graph))
                steps.append((None, True, weights, opt_text))
            elif config.arm == ARM_ENCODER_ONLY:
                steps.append((None, False, weights, opt_text))
            else:
                steps.append((refined_table(state), False, weights,
                              opt_text))
            for table, use_text, step_weights, opt in steps:
                loss, parts = total_loss(
                    batch_tensors(state, batch, table, use_text=use_text,
                                  context_table=last_table),
                    step_weights)
                if not np.isfinite(loss.data):
                    raise _diagnose_nonfinite(state, loss, epoch)
                opt.zero_grad()
                nk.backward(loss)
                opt.step()
                # the trace reports the objective validation also measures;
                # the full model's auxiliary graph steps stay out of it
                if use_text or config.arm != ARM_FULL:
                    for key in ("total", "contrastive", "translation"):
                        sums[key] += parts[key] * len(batch)
                    seen += len(batch)
        if seen == 0:
            raise ConfigError("no usable training batches (every batch "
                              "smaller than 2)")

        val = validation_loss(state, weights)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss in epoch "
                               f"{epoch}")
        trace.append(TraceRow(epoch=epoch, train_loss=sums["total"] / seen,
                              val_loss=val,
                              contrastive=sums["contrastive"] / seen,
                              translation=sums["translation"] / seen,
                              seconds=time.perf_counter() - t0))

        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = {name: t.data.copy()
                           for name, t in state.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    for name, data in best_params.items():
        state.params[name].data = data

    result = TrainResult(state=state, trace=tuple(trace),
                         best_epoch=best_epoch, best_val_loss=best_val,
                         split_digest=split_hash(state.pairs, state.split),
                         out_dir=out_dir)
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


def write_outputs(result: TrainResult, config: RunConfig,
                  out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_NAME), "w",
              encoding="utf-8") as fh:
        fh.write(serialize_config(config))
    write_trace(os.path.join(out_dir, TRACE_NAME), result.trace)
    nk.save_checkpoint(
        os.path.join(out_dir, CHECKPOINT_NAME), result.state.params,
        root_seed=config.seed,
        hyperparameters={"arm": config.arm,
                         "best_epoch": result.best_epoch,
                         "split_digest": result.split_digest,
                         "config": serialize_config(config)})


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write(f"{row.epoch},{row.train_loss:.6f},"
                     f"{row.val_loss:.6f},{row.contrastive:.6f},"
                     f"{row.translation:.6f},{row.seconds:.3f}\n")


def load_trace(path) -> tuple[TraceRow, ...]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if line != TRACE_HEADER:
                    raise ParseError(f"bad trace header: {line!r}", line=1)
                continue
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ParseError(f"expected 6 columns, got {len(parts)}",
                                 line=lineno)
            rows.append(TraceRow(epoch=int(parts[0]),
                                 train_loss=float(parts[1]),
                                 val_loss=float(parts[2]),
                                 contrastive=float(parts[3]),
                                 translation=float(parts[4]),
                                 seconds=float(parts[5])))
    return tuple(rows)


def overfit_single_batch(config: RunConfig, dataset: Dataset,
                         steps: int = 200, batch_size: int = 8,
                         lr: float = 3e-3) -> list[float]:
    """Sanity probe: drive the contrastive loss into the floor on one
    fixed batch of distinct query/ad pairs.  Returns the loss curve."""
    probe = dataclasses.replace(config, arm=ARM_ENCODER_ONLY, lambda2=0.0,
                                batch_size=max(2, batch_size))
    state = init_state(probe, dataset)
    batch = []
    seen_q: set[str] = set()
    seen_a: set[str] = set()
    for i in state.split.train:
        p = state.pairs[i]
        if p.query_key in seen_q or p.ad_id in seen_a:
            continue
        seen_q.add(p.query_key)
        seen_a.add(p.ad_id)
        batch.append(p)
        if len(batch) == probe.batch_size:
            break
    if len(batch) < 2:
        raise ConfigError("not enough distinct pairs to overfit")

    weights = loss_weights(probe)
    opt = nk.AdamW(state.params, lr=lr, weight_decay=0.0)
    losses = []
    for step in range(steps):
        loss, parts = total_loss(batch_tensors(state, batch, None), weights)
        if not np.isfinite(loss.data):
            raise _diagnose_nonfinite(state, loss, step)
        nk.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(parts["contrastive"])
    return losses
