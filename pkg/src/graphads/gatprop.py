"""Graph attention propagation over the heterogeneous graph.

One shared projection per layer; attention logits are LeakyReLU(a^T[Wh_i ||
Wh_j]) plus a learned per-edge-type bias gain * log(1+w).  Gains start at 0
so an initialized model matches the plain unweighted formula exactly.  The
layer is evaluated for all nodes at once through segment operations keyed by
destination node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .adgraph import ETYPES, KINDS, HeteroGraph, NodeRef
from .errors import ConfigError, DomainError, ShapeError
from .numkit import ops

_ETYPE_INDEX = {e: i for i, e in enumerate(ETYPES)}

NONLINEARITIES = ("ELU", "RELU", "IDENTITY")


@dataclass(frozen=True)
class GatConfig:
    n_layers: int = 2
    d_in: int = 32
    d_out: int = 32
    nonlinearity: str = "ELU"
    include_self: bool = True
    use_edge_weights: bool = True


def check_gat_config(config: GatConfig) -> None:
    if config.n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {config.n_layers}")
    if config.d_in <= 0 or config.d_out <= 0:
        raise ConfigError("d_in and d_out must be positive")
    if config.nonlinearity not in NONLINEARITIES:
        raise ConfigError(f"unknown nonlinearity {config.nonlinearity!r}")


@dataclass
class GatLayerParams:
    """W maps d_in -> d_out (stored [d_out, d_in]); a scores pairs; gains
    bias logits by edge type in ETYPES order."""

    W: nk.Tensor
    a: nk.Tensor
    gains: nk.Tensor
    leaky_slope: float = 0.2

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


def init_gat(config: GatConfig, seed: int,
             std: float = 0.02) -> list[GatLayerParams]:
    """Layer stack d_in -> d_out -> ... -> d_out; gains start at exact zero."""
    check_gat_config(config)
    rng = nk.seeded_rng(seed)
    layers: list[GatLayerParams] = []
    for k in range(config.n_layers):
        d_in = config.d_in if k == 0 else config.d_out
        layers.append(GatLayerParams(
            W=nk.gaussian_init(rng, (config.d_out, d_in), std,
                               name=f"layer{k}.W"),
            a=nk.gaussian_init(rng, (2 * config.d_out,), std,
                               name=f"layer{k}.a"),
            gains=nk.Tensor(np.zeros(len(ETYPES)), requires_grad=True,
                            name=f"layer{k}.gains")))
    return layers


def gat_param_dict(layers: list[GatLayerParams]) -> dict[str, nk.Tensor]:
    out: dict[str, nk.Tensor] = {}
    for k, layer in enumerate(layers):
        out[f"layer{k}.W"] = layer.W
        out[f"layer{k}.a"] = layer.a
        out[f"layer{k}.gains"] = layer.gains
    return out


def layers_from_dict(params: dict[str, nk.Tensor],
                     config: GatConfig) -> list[GatLayerParams]:
    check_gat_config(config)
    layers = []
    for k in range(config.n_layers):
        try:
            layers.append(GatLayerParams(W=params[f"layer{k}.W"],
                                         a=params[f"layer{k}.a"],
                                         gains=params[f"layer{k}.gains"]))
        except KeyError as err:
            raise ConfigError(f"checkpoint is missing GAT tensor {err}") from None
    return layers


def init_user_embeddings(n_users: int, d: int, seed: int,
                         std: float = 0.02) -> nk.Tensor:
    """Users have no text, so their seed embeddings are learned directly."""
    return nk.gaussian_init(nk.seeded_rng(seed), (max(n_users, 1), d), std,
                            name="user_embed")


class NodeIndex:
    """Global row numbering: queries, then ads, then users."""

    def __init__(self, g: HeteroGraph):
        self.counts = {kind: g.num_nodes(kind) for kind in KINDS}
        self.offsets: dict[str, int] = {}
        total = 0
        for kind in KINDS:
            self.offsets[kind] = total
            total += self.counts[kind]
        self.total = total

    def row(self, node: NodeRef) -> int:
        return self.offsets[node.kind] + node.local_id

    def kind_slice(self, kind: str) -> slice:
        start = self.offsets[kind]
        return slice(start, start + self.counts[kind])


@dataclass(frozen=True)
class EdgeArrays:
    """Flat neighborhood arrays: entry e means node src[e] is a neighbor of
    dst[e].  Self entries carry log_weight 0 so no gain can bias them."""

    dst: np.ndarray
    src: np.ndarray
    etype_idx: np.ndarray
    log_weight: np.ndarray
    n_nodes: int


def build_edge_arrays(g: HeteroGraph, include_self: bool = True) -> EdgeArrays:
    index = NodeIndex(g)
    dst: list[int] = []
    src: list[int] = []
    etype_idx: list[int] = []
    logw: list[float] = []
    for kind in KINDS:
        for node in g.all_nodes(kind):
            i = index.row(node)
            for nbr, etype, w in g.neighbors(node):
                dst.append(i)
                src.append(index.row(nbr))
                etype_idx.append(_ETYPE_INDEX[etype])
                logw.append(float(np.log1p(w)))
            if include_self:
                dst.append(i)
                src.append(i)
                etype_idx.append(0)
                logw.append(0.0)
    if not include_self:
        present = np.bincount(np.asarray(dst, dtype=np.int64),
                              minlength=index.total)
        if np.any(present == 0) and index.total > 0:
            bad = int(np.argmin(present))
            raise DomainError(
                f"node row {bad} has an empty neighborhood and "
                f"include_self is off")
    return EdgeArrays(np.asarray(dst, dtype=np.int64),
                      np.asarray(src, dtype=np.int64),
                      np.asarray(etype_idx, dtype=np.int64),
                      np.asarray(logw, dtype=np.float64),
                      index.total)


def _apply_nonlinearity(x: nk.Tensor, name: str) -> nk.Tensor:
    if name == "ELU":
        return ops.elu(x)
    if name == "RELU":
        return ops.leaky_relu(x, slope=0.0)
    if name == "IDENTITY":
        return x
    raise ConfigError(f"unknown nonlinearity {name!r}")


def attention_coefficients(h_i: nk.Tensor, neighbor_hs: nk.Tensor,
                           params: GatLayerParams,
                           edges: list[tuple[str, float]] | None = None
                           ) -> nk.Tensor:
    """Softmax attention over an explicit neighbor list.

    The caller decides the neighborhood (including whether the node itself
    is in it).  edges supplies (etype, weight) per neighbor for the
    log-weight bias; None evaluates the unbiased formula.
    """
    if neighbor_hs.data.ndim != 2:
        raise ShapeError(f"neighbor_hs must be [n, d], got {neighbor_hs.shape}")
    n = neighbor_hs.shape[0]
    if n == 0:
        raise DomainError("attention over an empty neighborhood")
    if edges is not None and len(edges) != n:
        raise ShapeError(f"{n} neighbors but {len(edges)} edge annotations")
    if h_i.shape != (params.d_in,) or neighbor_hs.shape[1] != params.d_in:
        raise ShapeError(f"expected d_in={params.d_in}, got h_i {h_i.shape} "
                         f"and neighbors {neighbor_hs.shape}")

    Wt = ops.transpose(params.W)
    wh_i = ops.matmul(ops.reshape(h_i, (1, params.d_in)), Wt)
    wh_j = ops.matmul(neighbor_hs, Wt)
    tiled = ops.take_rows(wh_i, np.zeros(n, dtype=np.int64))
    cat = ops.concat([tiled, wh_j], axis=1)
    scores = ops.reshape(ops.matmul(cat, ops.reshape(params.a,
                                                     (2 * params.d_out, 1))),
                         (n,))
    logits = ops.leaky_relu(scores, slope=params.leaky_slope)
    if edges is not None:
        etype_idx = np.array([_ETYPE_INDEX[e] for e, _ in edges],
                             dtype=np.int64)
        logw = nk.Tensor(np.log1p([w for _, w in edges]))
        logits = ops.add(logits, ops.mul(ops.take_rows(params.gains,
                                                       etype_idx), logw))
    return ops.softmax(logits, axis=0)


def refine_node(h_i: nk.Tensor, neighbor_hs: nk.Tensor | None,
                params: GatLayerParams, config: GatConfig,
                edges: list[tuple[str, float]] | None = None) -> nk.Tensor:
    """One GAT update for a single node given its explicit neighborhood.

    Used for inductive refinement of nodes that are not in the training
    graph.  include_self prepends the node itself (weight 1, no bias).
    """
    parts = []
    annot: list[tuple[str, float]] = []
    if config.include_self:
        parts.append(ops.reshape(h_i, (1, params.d_in)))
    if neighbor_hs is not None and neighbor_hs.shape[0] > 0:
        parts.append(neighbor_hs)
        if edges is not None:
            annot.extend(edges)
        else:
            annot.extend([(ETYPES[0], 0.0)] * neighbor_hs.shape[0])
    if not parts:
        raise DomainError("refine_node: empty neighborhood")
    stacked = ops.concat(parts, axis=0)
    if config.include_self:
        annot = [(ETYPES[0], 0.0)] + annot  # log1p(0)=0: self gets no bias
    use = annot if config.use_edge_weights else None
    coeff = attention_coefficients(h_i, stacked, params, edges=use)
    out = ops.matmul(ops.reshape(coeff, (1, stacked.shape[0])),
                     ops.matmul(stacked, ops.transpose(params.W)))
    return _apply_nonlinearity(ops.reshape(out, (params.d_out,)),
                               config.nonlinearity)


def gat_layer(g: HeteroGraph, table: nk.Tensor, params: GatLayerParams,
              config: GatConfig, arrays: EdgeArrays | None = None) -> nk.Tensor:
    """h'_i = sigma(sum_j a_ij W h_j) for every node, one pass."""
    if arrays is None:
        arrays = build_edge_arrays(g, config.include_self)
    if table.data.ndim != 2 or table.shape[0] != arrays.n_nodes:
        raise ShapeError(f"table {table.shape} does not match "
                         f"{arrays.n_nodes} graph nodes")
    if table.shape[1] != params.d_in:
        raise ShapeError(f"table dim {table.shape[1]} vs layer d_in "
                         f"{params.d_in}")
    if arrays.dst.size == 0:
        return table if config.nonlinearity == "IDENTITY" else \
            _apply_nonlinearity(table, config.nonlinearity)

    wh = ops.matmul(table, ops.transpose(params.W))
    h_dst = ops.take_rows(wh, arrays.dst)
    h_src = ops.take_rows(wh, arrays.src)
    cat = ops.concat([h_dst, h_src], axis=1)
    scores = ops.reshape(ops.matmul(cat, ops.reshape(params.a,
                                                     (2 * params.d_out, 1))),
                         (arrays.dst.size,))
    logits = ops.leaky_relu(scores, slope=params.leaky_slope)
    if config.use_edge_weights:
        bias = ops.mul(ops.take_rows(params.gains, arrays.etype_idx),
                       nk.Tensor(arrays.log_weight))
        logits = ops.add(logits, bias)
    coeff = ops.segment_softmax(logits, arrays.dst, arrays.n_nodes)
    agg = ops.segment_weighted_rowsum(h_src, coeff, arrays.dst,
                                      arrays.n_nodes)
    return _apply_nonlinearity(agg, config.nonlinearity)


def propagate(g: HeteroGraph, seed_embeddings: nk.Tensor,
              layers: list[GatLayerParams], config: GatConfig,
              arrays: EdgeArrays | None = None) -> nk.Tensor:
    """Run the full layer stack; gradients flow into seeds and parameters."""
    check_gat_config(config)
    if len(layers) != config.n_layers:
        raise ConfigError(f"config says {config.n_layers} layers, "
                          f"got {len(layers)} parameter sets")
    for k in range(1, len(layers)):
        if layers[k].d_in != layers[k - 1].d_out:
            raise ShapeError(f"layer {k} d_in {layers[k].d_in} does not chain "
                             f"from layer {k - 1} d_out {layers[k - 1].d_out}")
    if arrays is None:
        arrays = build_edge_arrays(g, config.include_self)
    table = seed_embeddings
    for params in layers:
        table = gat_layer(g, table, params, config, arrays=arrays)
    return table
