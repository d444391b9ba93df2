"""Arm-specific model state: parameters, node tables and embedding paths.

Three arms share one interface.  "full" runs both text towers and refines
node embeddings over the interaction graph; "encoder_only" skips the graph
(z' = z); "gat_only" drops the towers and learns free per-node embeddings,
so it sees structure but no text.  Unseen queries at inference get one
attention step over their session-context query nodes when available.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import adgraph as ag
from .. import dualenc as de
from .. import gatprop as gp
from .. import numkit as nk
from ..errors import ConfigError, ContractError, DomainError
from ..synthgen import AdRecord, Dataset
from ..textpipe import TextPipeline, encode_text
from .config import (ARM_ENCODER_ONLY, ARM_FULL, ARM_GAT_ONLY, RunConfig,
                     encoder_config, gat_config, loss_weights)
from .data import (Split, TrainPair, build_pairs, build_train_graph,
                   fit_train_pipeline, query_key_langs, split_pairs)

PREFIX_Q = "enc_q."
PREFIX_A = "enc_a."
PREFIX_SHARED = "enc."
PREFIX_GAT = "gat."
NAME_USERS = "users.table"
NAME_NODES = "nodes.table"

# raw co-occurrence weight of a single shared session
CONTEXT_WEIGHT = 1.0


@dataclass(frozen=True)
class TokenBatch:
    ids: np.ndarray
    mask: np.ndarray


@dataclass
class ModelState:
    config: RunConfig
    dataset: Dataset
    pairs: tuple[TrainPair, ...]
    split: Split
    key_lang: dict[str, str]
    ad_by_id: dict[str, AdRecord]
    session_events: dict[int, tuple[int, ...]]
    params: dict[str, nk.Tensor]
    pipeline: TextPipeline | None = None
    enc_config: de.EncoderConfig | None = None
    graph: ag.HeteroGraph | None = None
    node_index: gp.NodeIndex | None = None
    arrays: gp.EdgeArrays | None = None
    gat_config: gp.GatConfig | None = None
    query_tokens: TokenBatch | None = None
    ad_tokens: TokenBatch | None = None
    token_cache: dict = field(default_factory=dict)

    def query_row(self, key: str) -> int | None:
        node = self.graph.find(ag.QUERY, key)
        return None if node is None else self.node_index.row(node)

    def ad_row(self, ad_id: str) -> int | None:
        node = self.graph.find(ag.AD, ad_id)
        return None if node is None else self.node_index.row(node)


def _flatten(prefix: str, params: dict[str, nk.Tensor],
             into: dict[str, nk.Tensor]) -> None:
    for name, tensor in params.items():
        tensor.name = prefix + name
        into[prefix + name] = tensor


def _tower_view(state: ModelState, prefix: str) -> dict[str, nk.Tensor]:
    if state.config.tie_encoders:
        prefix = PREFIX_SHARED
    return {name[len(prefix):]: t for name, t in state.params.items()
            if name.startswith(prefix)}


def tower(state: ModelState, which: str) -> dict[str, nk.Tensor]:
    return _tower_view(state, PREFIX_Q if which == "q" else PREFIX_A)


def gat_layers(state: ModelState) -> list[gp.GatLayerParams]:
    sub = {name[len(PREFIX_GAT):]: t for name, t in state.params.items()
           if name.startswith(PREFIX_GAT)}
    return gp.layers_from_dict(sub, state.gat_config)


def refine_layer(state: ModelState) -> gp.GatLayerParams:
    """The extra attention layer that folds session context into an
    off-graph query embedding.  It is indexed after the propagation stack
    and trained only through the refinement path, so mapping context rows
    back into encoder space never competes with propagation."""
    k = state.config.gat_layers
    try:
        return gp.GatLayerParams(W=state.params[f"{PREFIX_GAT}layer{k}.W"],
                                 a=state.params[f"{PREFIX_GAT}layer{k}.a"],
                                 gains=state.params[
                                     f"{PREFIX_GAT}layer{k}.gains"])
    except KeyError as err:
        raise ContractError(f"missing refinement tensor {err}") from None


def tokens_for(state: ModelState, texts, langs) -> TokenBatch:
    ids, masks = [], []
    for text, lang in zip(texts, langs):
        entry = state.token_cache.get((text, lang))
        if entry is None:
            entry = encode_text(text, lang, state.pipeline)
            state.token_cache[(text, lang)] = entry
        ids.append(entry[0])
        masks.append(entry[1])
    return TokenBatch(np.stack(ids), np.stack(masks))


def encode_tokens(state: ModelState, batch: TokenBatch,
                  which: str) -> nk.Tensor:
    h = de.encode_batch(batch.ids, batch.mask, tower(state, which),
                        state.enc_config)
    return de.pool_batch(h, batch.mask, state.enc_config.pooling)


def init_state(config: RunConfig, dataset: Dataset) -> ModelState:
    pairs = build_pairs(dataset)
    if len(pairs) < 2:
        raise ConfigError(f"dataset yields {len(pairs)} training pairs; "
                          f"need at least 2")
    split = split_pairs(pairs, (config.train_frac, config.val_frac,
                                config.test_frac), config.seed)
    key_lang = query_key_langs(dataset)
    sessions: dict[int, list[int]] = {}
    for i, event in enumerate(dataset.events):
        sessions.setdefault(event.session_id, []).append(i)

    state = ModelState(config=config, dataset=dataset, pairs=pairs,
                       split=split, key_lang=key_lang,
                       ad_by_id=dataset.ad_by_id(),
                       session_events={k: tuple(v)
                                       for k, v in sessions.items()},
                       params={})

    if config.arm != ARM_ENCODER_ONLY:
        state.graph = build_train_graph(dataset, split.train_keys, config)
        state.node_index = gp.NodeIndex(state.graph)
        state.gat_config = gat_config(config)
        state.arrays = gp.build_edge_arrays(state.graph, config.include_self)
        _flatten(PREFIX_GAT,
                 gp.gat_param_dict(gp.init_gat(state.gat_config,
                                               nk.derive_seed(config.seed,
                                                              "gat"))),
                 state.params)
    if config.arm == ARM_FULL and config.refine_test_queries:
        extra = gp.init_gat(replace(state.gat_config, n_layers=1),
                            nk.derive_seed(config.seed, "gat-refine"))
        k = config.gat_layers
        _flatten(PREFIX_GAT,
                 {f"layer{k}." + name.split(".", 1)[1]: t
                  for name, t in gp.gat_param_dict(extra).items()},
                 state.params)

    if config.arm == ARM_GAT_ONLY:
        n = state.node_index.total
        rng = nk.seeded_rng(nk.derive_seed(config.seed, "nodes"))
        state.params[NAME_NODES] = nk.gaussian_init(rng, (n, config.d_model),
                                                    0.02, name=NAME_NODES)
        return state

    state.pipeline = fit_train_pipeline(dataset, split.train_keys, config)
    state.enc_config = encoder_config(config,
                                      len(state.pipeline.vocab))
    de.check_config(state.enc_config)
    pq, pa = de.init_towers(state.enc_config, config.seed)
    if config.tie_encoders:
        _flatten(PREFIX_SHARED, pq, state.params)
    else:
        _flatten(PREFIX_Q, pq, state.params)
        _flatten(PREFIX_A, pa, state.params)

    if config.arm == ARM_FULL:
        qkeys = [state.graph.text_ref(n)
                 for n in state.graph.all_nodes(ag.QUERY)]
        state.query_tokens = tokens_for(state, qkeys,
                                        [key_lang[k] for k in qkeys])
        ad_ids = [state.graph.text_ref(n)
                  for n in state.graph.all_nodes(ag.AD)]
        ads = [state.ad_by_id[a] for a in ad_ids]
        state.ad_tokens = tokens_for(state, [a.text for a in ads],
                                     [a.lang for a in ads])
        n_users = state.node_index.counts[ag.USER]
        if n_users:
            state.params[NAME_USERS] = gp.init_user_embeddings(
                n_users, config.d_model, nk.derive_seed(config.seed,
                                                        "users"))
            state.params[NAME_USERS].name = NAME_USERS
    return state


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------

def node_seed_table(state: ModelState,
                    detach_text: bool = False) -> nk.Tensor:
    """h^0 for every graph node, in query/ad/user row order.

    detach_text freezes the encoder-produced rows so a propagation step
    trains attention layers and user embeddings without pulling the text
    towers toward graph space."""
    if state.config.arm == ARM_GAT_ONLY:
        return state.params[NAME_NODES]
    parts = []
    if detach_text:
        with nk.no_grad():
            if state.query_tokens.ids.shape[0]:
                parts.append(nk.Tensor(
                    encode_tokens(state, state.query_tokens, "q").data))
            if state.ad_tokens.ids.shape[0]:
                parts.append(nk.Tensor(
                    encode_tokens(state, state.ad_tokens, "a").data))
    else:
        if state.query_tokens.ids.shape[0]:
            parts.append(encode_tokens(state, state.query_tokens, "q"))
        if state.ad_tokens.ids.shape[0]:
            parts.append(encode_tokens(state, state.ad_tokens, "a"))
    if NAME_USERS in state.params:
        parts.append(state.params[NAME_USERS])
    if not parts:
        raise DomainError("graph has no nodes to embed")
    return parts[0] if len(parts) == 1 else nk.ops.concat(parts, axis=0)


def refined_table(state: ModelState,
                  detach_text: bool = False) -> nk.Tensor:
    if state.graph is None:
        raise ContractError(f"{state.config.arm} arm has no graph to "
                            f"propagate over")
    return gp.propagate(state.graph,
                        node_seed_table(state, detach_text=detach_text),
                        gat_layers(state), state.gat_config,
                        arrays=state.arrays)


def batch_tensors(state: ModelState, batch: list[TrainPair],
                  table: nk.Tensor | None, use_text: bool = False,
                  context_table: np.ndarray | None = None):
    """AlignBatch for a training step.

    table is the on-tape refined node table for graph-view steps;
    use_text selects the text view instead (the only view the encoder
    arm has): raw encoder pairs, with the full model's queries passed
    through the same context-refinement step inference applies, attending
    over constant rows of context_table so the refinement parameters
    train against the exact computation evaluation will run.
    """
    from ..align import AlignBatch

    arm = state.config.arm
    if arm == ARM_ENCODER_ONLY or use_text:
        z_q = encode_tokens(state, tokens_for(
            state, [p.query_key for p in batch],
            [p.lang for p in batch]), "q")
        if arm == ARM_FULL and context_table is not None \
                and state.config.refine_test_queries:
            d = z_q.shape[1]
            rows = []
            for pos, p in enumerate(batch):
                row = nk.ops.reshape(nk.ops.take_rows(
                    z_q, np.array([pos], dtype=np.int64)), (d,))
                ctx = context_rows(state, p.event_index)
                if ctx:
                    row = refine_with_context(state, row, ctx,
                                              context_table)
                rows.append(nk.ops.reshape(row, (1, d)))
            z_q = nk.ops.concat(rows, axis=0)
        ads = [state.ad_by_id[p.ad_id] for p in batch]
        z_a = encode_tokens(state, tokens_for(
            state, [a.text for a in ads], [a.lang for a in ads]), "a")
    else:
        q_rows = np.array([state.query_row(p.query_key) for p in batch],
                          dtype=np.int64)
        a_rows = np.array([state.ad_row(p.ad_id) for p in batch],
                          dtype=np.int64)
        z_q = nk.ops.take_rows(table, q_rows)
        z_a = nk.ops.take_rows(table, a_rows)
    z_ref = None
    # graph-view steps carry no translation term: it would drag the
    # encoder's output for the reference string toward graph space
    if loss_weights(state.config).lambda2 > 0 \
            and (arm != ARM_FULL or use_text):
        z_ref = encode_tokens(state, tokens_for(
            state, [p.translation for p in batch],
            [p.translation_lang for p in batch]), "q")
    return AlignBatch(z_q=z_q, z_a=z_a, z_ref=z_ref)


# ---------------------------------------------------------------------------
# inference paths (values only)
# ---------------------------------------------------------------------------

def inference_table(state: ModelState) -> np.ndarray | None:
    """Refined node table for graph arms; None without a usable graph."""
    if state.graph is None or state.node_index.total == 0:
        return None
    with nk.no_grad():
        return refined_table(state).data


def embed_texts_np(state: ModelState, texts, langs, which: str) -> np.ndarray:
    if state.pipeline is None:
        raise ContractError(f"{state.config.arm} arm cannot embed raw text")
    with nk.no_grad():
        return encode_tokens(state, tokens_for(state, texts, langs),
                             which).data


def context_rows(state: ModelState, event_index: int) -> list[int]:
    """Graph rows of same-session query nodes, excluding the event itself."""
    event = state.dataset.events[event_index]
    rows = set()
    for j in state.session_events[event.session_id]:
        if j == event_index:
            continue
        row = state.query_row(
            ag.default_query_key(state.dataset.events[j].text))
        if row is not None:
            rows.add(row)
    return sorted(rows)


def refine_with_context(state: ModelState, base: nk.Tensor,
                        ctx: list[int], table: np.ndarray) -> nk.Tensor:
    """One attention step from an off-graph query over its session-context
    nodes' refined rows, through the dedicated refinement layer.

    Residual form: the step output corrects the encoder embedding instead
    of replacing it, so an untrained layer leaves the query untouched and
    training only has to learn the context-dependent adjustment.  Context
    rows are rescaled to the query's own norm (propagation output lives on
    a much smaller scale) and the step sees the query as a constant, so
    the correction branch trains the refinement layer alone."""
    scale = float(np.linalg.norm(base.data))
    ctx_rows = np.asarray(table[ctx], dtype=np.float64)
    norms = np.linalg.norm(ctx_rows, axis=1, keepdims=True)
    ctx_rows = ctx_rows / np.maximum(norms, 1e-12) * scale
    step = gp.refine_node(
        nk.Tensor(base.data.copy()), nk.Tensor(ctx_rows),
        refine_layer(state), state.gat_config,
        edges=[(ag.QQ_COOCCUR, CONTEXT_WEIGHT)] * len(ctx))
    return nk.ops.add(base, step)


def embed_events_np(state: ModelState, event_indices,
                    table: np.ndarray | None) -> np.ndarray:
    """Query embedding per event under the arm's inference rule.

    Graph-free text arms use the encoder directly.  The full model adds
    the single context-refinement step when the event's session touches
    train query nodes; a query with no usable context keeps its raw
    encoder embedding.
    """
    arm = state.config.arm
    events = state.dataset.events
    if arm == ARM_GAT_ONLY:
        if table is None:
            raise DomainError("free-embedding arm needs a non-empty graph")
        q_slice = state.node_index.kind_slice(ag.QUERY)
        if q_slice.stop == q_slice.start:
            raise DomainError("graph has no query nodes to average")
        fallback = table[q_slice].mean(axis=0)
        out = []
        for i in event_indices:
            row = state.query_row(ag.default_query_key(events[i].text))
            if row is not None:
                out.append(table[row])
                continue
            ctx = context_rows(state, i)
            out.append(table[ctx].mean(axis=0) if ctx else fallback)
        return np.stack(out)

    texts = [events[i].text for i in event_indices]
    langs = [events[i].lang for i in event_indices]
    base = embed_texts_np(state, texts, langs, "q")
    if arm == ARM_ENCODER_ONLY or table is None \
            or not state.config.refine_test_queries:
        return base
    out = []
    with nk.no_grad():
        for pos, i in enumerate(event_indices):
            ctx = context_rows(state, i)
            if not ctx:
                out.append(base[pos])
                continue
            refined = refine_with_context(state, nk.Tensor(base[pos]),
                                          ctx, table)
            out.append(refined.data)
    return np.stack(out)


def embed_ads_np(state: ModelState, ad_ids,
                 table: np.ndarray | None) -> np.ndarray:
    """Index-side embeddings.

    Text arms (encoder-only and full) index raw encoder outputs, so an
    edgeless graph leaves the full model exactly equal to its encoder.
    The free-embedding arm indexes its refined node rows.
    """
    arm = state.config.arm
    if arm == ARM_GAT_ONLY:
        if table is None:
            raise DomainError("free-embedding arm needs a non-empty graph")
        a_slice = state.node_index.kind_slice(ag.AD)
        if a_slice.stop == a_slice.start:
            raise DomainError("graph has no ad nodes")
        fallback = table[a_slice].mean(axis=0)
        rows = [state.ad_row(a) for a in ad_ids]
        return np.stack([table[r] if r is not None else fallback
                         for r in rows])
    ads = [state.ad_by_id[a] for a in ad_ids]
    return embed_texts_np(state, [a.text for a in ads],
                          [a.lang for a in ads], "a")
