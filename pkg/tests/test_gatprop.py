import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from graphads import adgraph as ag
from graphads import gatprop as gp
from graphads import numkit as nk
from graphads.errors import ConfigError, DomainError
from graphads.numkit import ops

ETYPE_IDX = {"QA_CLICK": 0, "UQ_SESSION": 1, "QQ_COOCCUR": 2}


# ---------------------------------------------------------------------------
# independent oracle: per-node loops, no shared code with the module
# ---------------------------------------------------------------------------

def oracle_rows(g):
    rows = {}
    for kind in ("QUERY", "AD", "USER"):
        for node in g.all_nodes(kind):
            rows[node] = len(rows)
    return rows


def oracle_gat_layer(g, H, W, a, gains, slope=0.2, include_self=True,
                     use_weights=True, sigma="ELU"):
    rows = oracle_rows(g)
    out = np.zeros((len(rows), W.shape[0]))
    for node, i in rows.items():
        entries = [(rows[nb], et, w) for nb, et, w in g.neighbors(node)]
        if include_self:
            entries.append((i, None, 1.0))
        logits = []
        for j, et, w in entries:
            s = float(a @ np.concatenate([W @ H[i], W @ H[j]]))
            s = s if s >= 0 else slope * s
            if use_weights and et is not None:
                s += float(gains[ETYPE_IDX[et]]) * math.log1p(w)
            logits.append(s)
        logits = np.array(logits)
        e = np.exp(logits - logits.max())
        coef = e / e.sum()
        msg = np.zeros(W.shape[0])
        for c, (j, _, _) in zip(coef, entries):
            msg += c * (W @ H[j])
        if sigma == "ELU":
            out[i] = np.where(msg > 0, msg, np.expm1(msg))
        elif sigma == "RELU":
            out[i] = np.maximum(msg, 0.0)
        else:
            out[i] = msg
    return out


def params_from_arrays(W, a, gains, slope=0.2):
    return gp.GatLayerParams(W=nk.Tensor(W, requires_grad=True),
                             a=nk.Tensor(a, requires_grad=True),
                             gains=nk.Tensor(gains, requires_grad=True),
                             leaky_slope=slope)


def small_graph():
    logs = ag.InteractionLogs(
        clicks=(ag.ClickRecord("u1", "q1", "a1", 1, 0),
                ag.ClickRecord("u1", "q1", "a1", 1, 0),
                ag.ClickRecord("u1", "q2", "a1", 1, 0),
                ag.ClickRecord("u1", "q2", "a2", 1, 1)),
        sessions=(ag.SessionRecord("u1", ("q1", "q2")),))
    return ag.build_graph(logs)  # 5 nodes: q1 q2 a1 a2 u1


def random_small_graph(rng):
    queries = ["qa", "qb", "qc"]
    ads = ["a1", "a2"]
    clicks = tuple(
        ag.ClickRecord("u1", rng.choice(queries), rng.choice(ads), 1,
                       int(rng.integers(0, 2)))
        for _ in range(rng.integers(0, 5)))
    sessions = tuple(
        ag.SessionRecord("u1", tuple(rng.choice(queries,
                                                size=rng.integers(1, 4))))
        for _ in range(rng.integers(0, 3)))
    return ag.build_graph(ag.InteractionLogs(clicks, sessions))


# ---------------------------------------------------------------------------
# attention coefficients
# ---------------------------------------------------------------------------

def test_single_neighbor_gets_full_attention():
    rng = nk.seeded_rng(0)
    params = params_from_arrays(rng.normal(size=(3, 2)), rng.normal(size=6),
                                np.zeros(3))
    coeff = gp.attention_coefficients(nk.Tensor(rng.normal(size=2)),
                                      nk.Tensor(rng.normal(size=(1, 2))),
                                      params)
    np.testing.assert_allclose(coeff.data, [1.0])


def test_identical_neighbors_share_attention_uniformly():
    rng = nk.seeded_rng(1)
    params = params_from_arrays(rng.normal(size=(3, 2)), rng.normal(size=6),
                                np.zeros(3))
    row = rng.normal(size=2)
    nbrs = nk.Tensor(np.tile(row, (4, 1)))
    coeff = gp.attention_coefficients(nk.Tensor(rng.normal(size=2)), nbrs,
                                      params)
    np.testing.assert_allclose(coeff.data, [0.25] * 4, atol=1e-12)


def test_hand_case_logits_depend_only_on_query_node():
    # W=I, a=[1,0,0,0]: score = (Wh_i)[0] for every neighbor, so the
    # post-LeakyReLU logits tie and the softmax is uniform.
    params = params_from_arrays(np.eye(2), np.array([1.0, 0.0, 0.0, 0.0]),
                                np.zeros(3))
    h_i = nk.Tensor(np.array([-1.0, 5.0]))
    nbrs = nk.Tensor(np.array([[3.0, 0.0], [-2.0, 1.0], [0.5, 0.5]]))
    coeff = gp.attention_coefficients(h_i, nbrs, params)
    np.testing.assert_allclose(coeff.data, [1 / 3] * 3, atol=1e-12)


def test_hand_case_softmax_over_neighbor_first_coordinate():
    # a=[0,0,1,0] reads (Wh_j)[0]: logits LeakyReLU([1,-1]) = [1,-0.2]
    params = params_from_arrays(np.eye(2), np.array([0.0, 0.0, 1.0, 0.0]),
                                np.zeros(3))
    h_i = nk.Tensor(np.zeros(2))
    nbrs = nk.Tensor(np.array([[1.0, 7.0], [-1.0, 7.0]]))
    coeff = gp.attention_coefficients(h_i, nbrs, params)
    z = math.exp(1.0) + math.exp(-0.2)
    np.testing.assert_allclose(coeff.data,
                               [math.exp(1.0) / z, math.exp(-0.2) / z],
                               atol=1e-12)


def test_empty_neighborhood_is_domain_error():
    params = params_from_arrays(np.eye(2), np.zeros(4), np.zeros(3))
    with pytest.raises(DomainError):
        gp.attention_coefficients(nk.Tensor(np.zeros(2)),
                                  nk.Tensor(np.zeros((0, 2))), params)


def test_edge_weight_bias_shifts_attention():
    # identical neighbors, gain g=1 on QA_CLICK: coeff = softmax(log(1+w))
    params = params_from_arrays(np.eye(2), np.zeros(4),
                                np.array([1.0, 0.0, 0.0]))
    h_i = nk.Tensor(np.zeros(2))
    nbrs = nk.Tensor(np.zeros((2, 2)))
    coeff = gp.attention_coefficients(
        h_i, nbrs, params, edges=[("QA_CLICK", 3.0), ("QA_CLICK", 1.0)])
    np.testing.assert_allclose(coeff.data, [4.0 / 6.0, 2.0 / 6.0], atol=1e-12)


def test_zero_gains_ignore_edge_weights():
    rng = nk.seeded_rng(2)
    params = params_from_arrays(rng.normal(size=(2, 2)), rng.normal(size=4),
                                np.zeros(3))
    h_i = nk.Tensor(rng.normal(size=2))
    nbrs = nk.Tensor(rng.normal(size=(3, 2)))
    plain = gp.attention_coefficients(h_i, nbrs, params)
    biased = gp.attention_coefficients(
        h_i, nbrs, params,
        edges=[("QA_CLICK", 9.0), ("UQ_SESSION", 1.0), ("QQ_COOCCUR", 4.0)])
    np.testing.assert_allclose(plain.data, biased.data, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 16))
def test_coefficients_are_a_distribution(n, seed):
    rng = nk.seeded_rng(seed)
    params = params_from_arrays(rng.normal(size=(3, 2)), rng.normal(size=6),
                                rng.normal(size=3))
    coeff = gp.attention_coefficients(
        nk.Tensor(rng.normal(size=2)), nk.Tensor(rng.normal(size=(n, 2))),
        params, edges=[("QQ_COOCCUR", float(rng.uniform(0.5, 5)))] * n)
    assert abs(coeff.data.sum() - 1.0) < 1e-6
    assert np.all(coeff.data > 0) and np.all(coeff.data <= 1.0)


# ---------------------------------------------------------------------------
# gat_layer
# ---------------------------------------------------------------------------

def test_isolated_nodes_with_identity_setup_pass_through():
    g = ag.HeteroGraph({"QUERY": ["q1", "q2"], "AD": ["a1"], "USER": []}, [])
    config = gp.GatConfig(n_layers=1, d_in=2, d_out=2,
                          nonlinearity="IDENTITY")
    params = params_from_arrays(np.eye(2), np.array([0.3, -0.2, 0.5, 0.1]),
                                np.zeros(3))
    H = nk.Tensor(nk.seeded_rng(3).normal(size=(3, 2)))
    out = gp.gat_layer(g, H, params, config)
    np.testing.assert_allclose(out.data, H.data, atol=1e-12)


def test_symmetric_pair_stays_symmetric():
    logs = ag.InteractionLogs(sessions=(ag.SessionRecord("u1", ("q1", "q2")),))
    g = ag.build_graph(logs)
    rng = nk.seeded_rng(4)
    config = gp.GatConfig(n_layers=1, d_in=3, d_out=3)
    params = params_from_arrays(rng.normal(size=(3, 3)), rng.normal(size=6),
                                np.zeros(3))
    row = rng.normal(size=3)
    H = np.vstack([row, row, rng.normal(size=3)])  # q1 == q2, u1 differs
    out = gp.gat_layer(g, nk.Tensor(H), params, config).data
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)


def test_five_node_graph_matches_oracle_to_1e10():
    g = small_graph()
    rng = nk.seeded_rng(5)
    W = rng.normal(size=(3, 3))
    a = rng.normal(size=6)
    gains = rng.normal(size=3)
    H = rng.normal(size=(5, 3))
    config = gp.GatConfig(n_layers=1, d_in=3, d_out=3)
    got = gp.gat_layer(g, nk.Tensor(H), params_from_arrays(W, a, gains),
                       config).data
    want = oracle_gat_layer(g, H, W, a, gains)
    assert np.max(np.abs(got - want)) < 1e-10


def test_oracle_equivalence_over_random_draws():
    rng = nk.seeded_rng(6)
    checked = 0
    worst = 0.0
    while checked < 100:
        g = random_small_graph(rng)
        n = sum(g.num_nodes(k) for k in ag.KINDS)
        if n == 0:
            continue
        include_self = bool(rng.integers(0, 2))
        if not include_self and any(
                not g.neighbors(node) for kind in ag.KINDS
                for node in g.all_nodes(kind)):
            include_self = True
        use_weights = bool(rng.integers(0, 2))
        sigma = ["ELU", "RELU", "IDENTITY"][int(rng.integers(0, 3))]
        W = rng.normal(size=(2, 3))
        a = rng.normal(size=4)
        gains = rng.normal(size=3)
        H = rng.normal(size=(n, 3))
        config = gp.GatConfig(n_layers=1, d_in=3, d_out=2,
                              nonlinearity=sigma, include_self=include_self,
                              use_edge_weights=use_weights)
        got = gp.gat_layer(g, nk.Tensor(H),
                           params_from_arrays(W, a, gains), config).data
        want = oracle_gat_layer(g, H, W, a, gains,
                                include_self=include_self,
                                use_weights=use_weights, sigma=sigma)
        worst = max(worst, float(np.max(np.abs(got - want))))
        checked += 1
    assert worst < 1e-9


def test_refine_node_agrees_with_full_layer():
    g = small_graph()
    index = gp.NodeIndex(g)
    rng = nk.seeded_rng(7)
    config = gp.GatConfig(n_layers=1, d_in=3, d_out=3)
    params = params_from_arrays(rng.normal(size=(3, 3)), rng.normal(size=6),
                                rng.normal(size=3))
    H = nk.Tensor(rng.normal(size=(index.total, 3)))
    full = gp.gat_layer(g, H, params, config).data
    node = g.node(ag.QUERY, "q1")
    nbrs = g.neighbors(node)
    nbr_rows = nk.Tensor(H.data[[index.row(n) for n, _, _ in nbrs]])
    edges = [(et, w) for _, et, w in nbrs]
    h_i = nk.Tensor(H.data[index.row(node)])
    single = gp.refine_node(h_i, nbr_rows, params, config, edges=edges)
    np.testing.assert_allclose(single.data, full[index.row(node)], atol=1e-10)


def test_permutation_equivariance():
    rename = {"qa": "qz", "qb": "qa", "qc": "qm"}

    def logs_with(names):
        return ag.InteractionLogs(
            clicks=(ag.ClickRecord("u1", names["qa"], "a1", 1, 0),
                    ag.ClickRecord("u2", names["qb"], "a2", 1, 0)),
            sessions=(ag.SessionRecord("u1", (names["qa"], names["qc"])),
                      ag.SessionRecord("u2", (names["qb"], names["qc"]))))

    ident = {k: k for k in rename}
    g1 = ag.build_graph(logs_with(ident))
    g2 = ag.build_graph(logs_with(rename))
    idx1, idx2 = gp.NodeIndex(g1), gp.NodeIndex(g2)

    perm = {}
    for kind in ag.KINDS:
        for node in g1.all_nodes(kind):
            ref = g1.text_ref(node)
            mapped = rename.get(ref, ref) if kind == ag.QUERY else ref
            perm[idx1.row(node)] = idx2.row(g2.node(kind, mapped))

    rng = nk.seeded_rng(8)
    H1 = rng.normal(size=(idx1.total, 3))
    H2 = np.zeros_like(H1)
    for i, j in perm.items():
        H2[j] = H1[i]
    config = gp.GatConfig(n_layers=1, d_in=3, d_out=3)
    params = params_from_arrays(rng.normal(size=(3, 3)), rng.normal(size=6),
                                rng.normal(size=3))
    out1 = gp.gat_layer(g1, nk.Tensor(H1), params, config).data
    out2 = gp.gat_layer(g2, nk.Tensor(H2), params, config).data
    for i, j in perm.items():
        np.testing.assert_allclose(out1[i], out2[j], atol=1e-12)


# ---------------------------------------------------------------------------
# propagate
# ---------------------------------------------------------------------------

def path_graph():
    # legal 2-hop chain: USER u1 - (session) - q1 - (click) - a1
    logs = ag.InteractionLogs(
        clicks=(ag.ClickRecord("u1", "q1", "a1", 1, 0),),
        sessions=(ag.SessionRecord("u1", ("q1",)),))
    return ag.build_graph(logs)


def test_two_layers_reach_two_hops():
    g = path_graph()
    index = gp.NodeIndex(g)
    rng = nk.seeded_rng(9)
    config = gp.GatConfig(n_layers=2, d_in=3, d_out=3)
    layers = gp.init_gat(config, seed=10, std=0.3)
    H = rng.normal(size=(index.total, 3))
    user_row = index.row(g.node(ag.USER, "u1"))
    ad_row = index.row(g.node(ag.AD, "a1"))

    bumped = H.copy()
    bumped[user_row] += 1.0
    base = gp.propagate(g, nk.Tensor(H), layers, config).data
    moved = gp.propagate(g, nk.Tensor(bumped), layers, config).data
    assert np.max(np.abs(base[ad_row] - moved[ad_row])) > 1e-8


def test_one_layer_stays_local():
    g = path_graph()
    index = gp.NodeIndex(g)
    rng = nk.seeded_rng(11)
    config = gp.GatConfig(n_layers=1, d_in=3, d_out=3)
    layers = gp.init_gat(config, seed=12, std=0.3)
    H = rng.normal(size=(index.total, 3))
    user_row = index.row(g.node(ag.USER, "u1"))
    ad_row = index.row(g.node(ag.AD, "a1"))

    bumped = H.copy()
    bumped[user_row] += 1.0
    base = gp.propagate(g, nk.Tensor(H), layers, config).data
    moved = gp.propagate(g, nk.Tensor(bumped), layers, config).data
    np.testing.assert_allclose(base[ad_row], moved[ad_row], atol=1e-12)


def test_zero_layers_rejected():
    with pytest.raises(ConfigError):
        gp.init_gat(gp.GatConfig(n_layers=0), seed=0)


def test_layer_count_mismatch_rejected():
    g = path_graph()
    config = gp.GatConfig(n_layers=2, d_in=2, d_out=2)
    layers = gp.init_gat(gp.GatConfig(n_layers=1, d_in=2, d_out=2), seed=0)
    with pytest.raises(ConfigError):
        gp.propagate(g, nk.Tensor(np.zeros((3, 2))), layers, config)


def test_missing_neighborhood_without_self_is_domain_error():
    logs = ag.InteractionLogs(clicks=(ag.ClickRecord("u1", "q1", "a1", 0, 0),))
    g = ag.build_graph(logs)  # nodes exist, no edges
    with pytest.raises(DomainError):
        gp.build_edge_arrays(g, include_self=False)


def test_gat_gains_start_at_zero_and_match_unweighted_model():
    g = small_graph()
    rng = nk.seeded_rng(13)
    config_w = gp.GatConfig(n_layers=1, d_in=3, d_out=3,
                            use_edge_weights=True)
    config_p = gp.GatConfig(n_layers=1, d_in=3, d_out=3,
                            use_edge_weights=False)
    layers = gp.init_gat(config_w, seed=14)
    np.testing.assert_array_equal(layers[0].gains.data, 0.0)
    H = nk.Tensor(rng.normal(size=(5, 3)))
    with_w = gp.gat_layer(g, H, layers[0], config_w).data
    without = gp.gat_layer(g, H, layers[0], config_p).data
    np.testing.assert_allclose(with_w, without, atol=1e-15)


def test_propagate_gradients_match_finite_differences():
    g = small_graph()
    index = gp.NodeIndex(g)
    rng = nk.seeded_rng(15)
    config = gp.GatConfig(n_layers=2, d_in=3, d_out=3)
    weights = nk.Tensor(rng.normal(size=(index.total, 3)))

    base = gp.init_gat(config, seed=16, std=0.4)
    seeds = rng.normal(size=(index.total, 3))
    arrays = [seeds] + [t.data for layer in base
                        for t in (layer.W, layer.a, layer.gains)]

    def f(ts):
        layers = []
        for k in range(config.n_layers):
            W, a, gains = ts[1 + 3 * k: 4 + 3 * k]
            layers.append(gp.GatLayerParams(W=W, a=a, gains=gains))
        out = gp.propagate(g, ts[0], layers, config)
        return ops.sum_all(ops.mul(out, weights))

    worst = check_gradients(f, arrays, h=1e-5, tol=1e-3)
    assert worst < 1e-3
