import numpy as np
import pytest

from dvhgnn import Tensor
from dvhgnn.config import dvhgnn_t
from dvhgnn.dhconv import (
    HeadParams,
    SingularWeightError,
    aggregate_cluster_edge,
    aggregate_dilated_edge,
    aggregation_coefficients,
    dhconv_head,
    dhconv_head_reference,
    edge_gate,
    multi_head_dhconv,
    vertex_message,
    vertex_update,
)
from dvhgnn.gradcheck import finite_diff_grad, relative_error
from dvhgnn.hypergraph import CLUSTER, DILATED, Hyperedge, PatchField, build_multiscale_hypergraph
from oracles import cluster_edge_loop, coefficients_by_probe, dense_head_oracle, gelu, sig

CFG = dvhgnn_t()


def random_cluster_edge(rng, n_vertices, dim, size):
    members = tuple(sorted(rng.choice(n_vertices, size=size, replace=False).tolist()))
    return Hyperedge(
        CLUSTER,
        0,
        0,
        members,
        members,
        centroid=Tensor(rng.standard_normal(dim)),
        similarities=Tensor(rng.uniform(-1, 1, size)),
    )


def random_dilated_edge(rng, n_vertices, dim, size):
    members = tuple(sorted(rng.choice(n_vertices, size=size, replace=False).tolist()))
    return Hyperedge(DILATED, 0, 1, members, members, centroid=Tensor(rng.standard_normal(dim)))


# ------------------------------------------------------ edge aggregation
def test_cluster_edge_neutral_gates():
    x = np.array([[2.0, 0.0], [0.0, 4.0]])
    hc = np.array([1.0, 1.0])
    e = Hyperedge(CLUSTER, 0, 0, (0, 1), (0, 1), centroid=Tensor(hc), similarities=Tensor([0.3, -0.8]))
    got = aggregate_cluster_edge(e, Tensor(x), 0.0, 0.0).data
    assert np.allclose(got, (hc + 0.5 * x[0] + 0.5 * x[1]) / 2, rtol=0, atol=1e-15)


def test_empty_cluster_edge_returns_centroid():
    hc = np.array([0.5, -1.0, 2.0])
    e = Hyperedge(CLUSTER, 0, 3, (), (), centroid=Tensor(hc), similarities=Tensor(np.zeros(0)))
    assert np.array_equal(aggregate_cluster_edge(e, Tensor(np.ones((4, 3))), 1.0, 0.0).data, hc)


def test_dilated_weight_off_and_on():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((9, 3))
    hc = rng.standard_normal(3)
    e = Hyperedge(DILATED, 0, 1, tuple(range(9)), tuple(range(9)), centroid=Tensor(hc))
    assert np.array_equal(aggregate_dilated_edge(e, Tensor(x), 0.0).data, hc)
    assert np.allclose(aggregate_dilated_edge(e, Tensor(x), 1.0).data, (hc + x.sum(0)) / 10, rtol=0, atol=1e-15)


def test_singular_dilated_weight():
    e = Hyperedge(DILATED, 0, 2, tuple(range(9)), tuple(range(9)), centroid=Tensor(np.zeros(2)))
    with pytest.raises(SingularWeightError):
        aggregate_dilated_edge(e, Tensor(np.ones((9, 2))), -1.0 / 9)


def test_singular_weight_in_batched_path():
    rng = np.random.default_rng(1)
    p = HeadParams.init(4, 3, 3, rng)
    p.rate_weights = Tensor([0.5, -1.0 / 9, 0.5])
    with pytest.raises(SingularWeightError):
        dhconv_head(Tensor(rng.standard_normal((7, 7, 4))), p, CFG)


def test_wrong_edge_kind_rejected():
    e = Hyperedge(DILATED, 0, 1, (0,), (0,), centroid=Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        aggregate_cluster_edge(e, Tensor(np.ones((1, 2))), 1.0, 0.0)


def test_cluster_edge_scalar_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        dim, size = int(rng.integers(1, 33)), int(rng.integers(1, 50))
        x = rng.standard_normal((60, dim))
        e = random_cluster_edge(rng, 60, dim, size)
        a, b = rng.normal(size=2)
        ref = cluster_edge_loop(x, e.members, e.similarities.data, e.centroid.data, a, b)
        got = aggregate_cluster_edge(e, Tensor(x), a, b).data
        assert np.max(np.abs(got - ref)) <= 1e-12


def test_coefficients_match_helper():
    rng = np.random.default_rng(3)
    for _ in range(20):
        e = random_cluster_edge(rng, 30, 2, int(rng.integers(0, 20)))
        a, b = rng.normal(size=2)
        assert np.allclose(coefficients_by_probe(e, a, b, 0.0), aggregation_coefficients(e, a, b), atol=1e-15)


def test_convex_combination():
    rng = np.random.default_rng(4)
    for _ in range(300):
        size = int(rng.integers(0, 50))
        if rng.random() < 0.5:
            e = random_cluster_edge(rng, 64, 2, size)
        else:
            e = random_dilated_edge(rng, 64, 2, size)
        coef = coefficients_by_probe(e, rng.normal() * 5, rng.normal() * 5, rng.uniform(0, 3))
        assert np.all(coef >= 0)
        assert abs(coef.sum() - 1.0) <= 1e-12


def test_member_order_does_not_change_result():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((40, 8)))
    for _ in range(20):
        e = random_cluster_edge(rng, 40, 8, 17)
        perm = rng.permutation(17)
        shuffled = Hyperedge(
            CLUSTER,
            0,
            0,
            tuple(e.members[i] for i in perm),
            tuple(e.local[i] for i in perm),
            centroid=e.centroid,
            similarities=Tensor(e.similarities.data[perm]),
        )
        assert np.array_equal(
            aggregate_cluster_edge(e, x, 0.7, -0.2).data, aggregate_cluster_edge(shuffled, x, 0.7, -0.2).data
        )
        d = random_dilated_edge(rng, 40, 8, 9)
        rev = Hyperedge(DILATED, 0, 1, d.members[::-1], d.local[::-1], centroid=d.centroid)
        assert np.array_equal(aggregate_dilated_edge(d, x, 0.3).data, aggregate_dilated_edge(rev, x, 0.3).data)


# ----------------------------------------------------------- vertex side
def window_graph(seed=0, dim=5):
    x = np.random.default_rng(seed).standard_normal((7, 7, dim))
    return x, build_multiscale_hypergraph(PatchField(x), CFG)


def test_single_cluster_vertex_message():
    x, hg = window_graph()
    values = Tensor(x.reshape(49, 5))
    feats = [aggregate_cluster_edge(e, values, 0.0, 0.0) if e.kind == CLUSTER else e.centroid for e in hg.edges]
    # local (0, 1) lies in no dilated pattern around the centre
    assert [hg.edges[i].kind for i in hg.incidence[1]] == [CLUSTER]
    z = vertex_message(1, hg, feats, 0.0, 0.0, Tensor([0.5, 0.5, 0.5]), CFG.rates)
    assert np.array_equal(z.data, 0.5 * feats[hg.incidence[1][0]].data)


def test_edge_gate_indicators():
    x, hg = window_graph(1)
    wr = Tensor([0.1, 0.2, 0.3])
    for v, inc in enumerate(hg.incidence):
        for eid in inc:
            e = hg.edges[eid]
            gate = edge_gate(e, v, 1.3, -0.4, wr, CFG.rates).item()
            if e.kind == CLUSTER:
                s = e.similarities.data[e.members.index(v)]
                assert gate == pytest.approx(sig(1.3 * s - 0.4), abs=1e-15)
            else:
                assert gate == wr.data[CFG.rates.index(e.param)]


def identity_params(dim):
    p = HeadParams.init(dim, dim, 3, np.random.default_rng(0))
    kern = np.zeros((3, 3, dim))
    kern[1, 1] = 1.0
    p.conv_kernel = Tensor(kern)
    p.conv_bias = Tensor(np.zeros(dim))
    p.fc_weight = Tensor(np.eye(dim))
    p.fc_bias = Tensor(np.zeros(dim))
    return p


def test_vertex_update_identity_path():
    x = np.random.default_rng(6).standard_normal((5, 6, 3))
    out = vertex_update(Tensor(x), Tensor(np.zeros_like(x)), identity_params(3)).data
    ref = np.vectorize(gelu)(x)
    assert np.allclose(out, ref, rtol=0, atol=1e-15)


def test_constant_field_fixpoint():
    c = np.array([0.4, -1.1, 2.0])
    hg = build_multiscale_hypergraph(PatchField(np.tile(c, (7, 7, 1))), CFG)
    values = Tensor(np.tile(c, (49, 1)))
    alpha, beta, wr = 0.8, 0.3, Tensor([0.2, 0.7, 1.5])
    feats = []
    for e in hg.edges:
        hc = Tensor(c)
        if e.kind == CLUSTER:
            feats.append(aggregate_cluster_edge(e, values, alpha, beta, centroid=hc))
        else:
            feats.append(aggregate_dilated_edge(e, values, wr.data[CFG.rates.index(e.param)], centroid=hc))
        assert np.allclose(feats[-1].data, c, rtol=0, atol=1e-15)
    for v in range(49):
        gates = 0.0
        for eid in hg.incidence[v]:
            e = hg.edges[eid]
            if e.kind == CLUSTER:
                gates += sig(alpha * e.similarities.data[e.members.index(v)] + beta)
            else:
                gates += wr.data[CFG.rates.index(e.param)]
        z = vertex_message(v, hg, feats, alpha, beta, wr, CFG.rates).data
        assert np.allclose(z, c * gates, rtol=0, atol=1e-14)


# ------------------------------------------------------------ dense oracle
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_head_matches_dense_incidence_oracle(seed):
    rng = np.random.default_rng(seed)
    p = HeadParams.init(6, 5, 3, rng)
    p.alpha, p.beta, p.eps = Tensor(rng.normal()), Tensor(rng.normal()), Tensor(rng.normal() * 0.3)
    p.rate_weights = Tensor(rng.uniform(0.1, 2.0, 3))
    x = rng.standard_normal((7, 7, 6))
    ref = dense_head_oracle(x, p)
    assert np.max(np.abs(dhconv_head(Tensor(x), p, CFG).data - ref)) <= 1e-10
    assert np.max(np.abs(dhconv_head_reference(Tensor(x), p, CFG).data - ref)) <= 1e-10


def test_batched_matches_reference_on_padded_field():
    rng = np.random.default_rng(7)
    p = HeadParams.init(4, 3, 3, rng)
    x = Tensor(rng.standard_normal((9, 10, 4)))
    assert np.max(np.abs(dhconv_head(x, p, CFG).data - dhconv_head_reference(x, p, CFG).data)) <= 1e-12


# -------------------------------------------------------------- multi-head
def test_single_head_identity_fusion():
    rng = np.random.default_rng(8)
    p = HeadParams.init(4, 4, 3, rng)
    x = Tensor(rng.standard_normal((7, 14, 4)))
    out = multi_head_dhconv(PatchField(x), [p], Tensor(np.eye(4)), Tensor(np.zeros(4)), CFG)
    assert np.array_equal(out.features.data, dhconv_head(x, p, CFG).data)


def test_stage_one_tiny_shape():
    rng = np.random.default_rng(9)
    heads = [HeadParams.init(48, 24, 3, rng) for _ in range(3)]
    field = PatchField(rng.standard_normal((56, 56, 48)), stage=1)
    out = multi_head_dhconv(field, heads, Tensor(rng.standard_normal((72, 48)) * 0.1), Tensor(np.zeros(48)), CFG)
    assert out.features.shape == (56, 56, 48) and out.stage == 1


def test_head_permutation_with_fusion_blocks():
    rng = np.random.default_rng(10)
    dim, hd = 5, 3
    heads = [HeadParams.init(dim, hd, 3, rng) for _ in range(3)]
    W = rng.standard_normal((3 * hd, dim))
    b = rng.standard_normal(dim)
    field = PatchField(rng.standard_normal((7, 7, dim)))
    base = multi_head_dhconv(field, heads, Tensor(W), Tensor(b), CFG).features.data
    order = [2, 0, 1]
    Wp = np.concatenate([W[k * hd:(k + 1) * hd] for k in order])
    moved = multi_head_dhconv(field, [heads[k] for k in order], Tensor(Wp), Tensor(b), CFG).features.data
    assert np.max(np.abs(base - moved)) <= 1e-12


def test_threaded_heads_bitwise_equal():
    rng = np.random.default_rng(11)
    heads = [HeadParams.init(6, 4, 3, rng) for _ in range(4)]
    W, b = Tensor(rng.standard_normal((16, 6))), Tensor(rng.standard_normal(6))
    field = PatchField(rng.standard_normal((14, 14, 6)))
    seq = multi_head_dhconv(field, heads, W, b, CFG, threads=0).features.data
    par = multi_head_dhconv(field, heads, W, b, CFG, threads=4).features.data
    assert np.array_equal(seq, par)


# ---------------------------------------------------------------- gradients
def test_head_gradients_on_single_window():
    rng = np.random.default_rng(12)
    p = HeadParams.init(4, 3, 3, rng)
    p.alpha, p.beta = Tensor(0.9, requires_grad=True), Tensor(-0.3, requires_grad=True)
    p.eps = Tensor(0.2, requires_grad=True)
    p.rate_weights = Tensor([0.4, 0.6, 0.9], requires_grad=True)
    x = Tensor(rng.standard_normal((7, 7, 4)))
    probe = Tensor(rng.standard_normal((7, 7, 3)))

    def loss():
        return (dhconv_head(x, p, CFG) * probe).sum()

    loss().backward()
    for name in ("alpha", "beta", "eps", "rate_weights", "sim_weight", "value_weight", "sim_bias", "fc_weight"):
        t = getattr(p, name)
        numeric = finite_diff_grad(lambda _: loss(), t)
        err = relative_error(t.grad, numeric).max()
        assert err < 1e-4, (name, err)
