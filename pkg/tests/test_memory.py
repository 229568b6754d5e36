import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import numeric_grad, rel_error
from oracles import (
    brute_force_topk_pairs,
    materialized_scores,
    memory_fd_errors,
    random_memory_case,
    unfactorized_forward,
)
from msn.memory import (
    DegenerateNormalizationError,
    MemoryBlock,
    MemoryConfig,
    aggregate_values,
    combine_topk,
    effective_keys,
    flat_index,
    grad_memory_gate,
    memory_backward,
    memory_forward,
    memory_gate,
    memory_param_count,
    query_split,
    score_subkeys,
    selection_weights,
)
from msn.numerics import ContractError, LayerNormParams


def small_block(rng, **kw):
    cfg = MemoryConfig(**{"n": 64, "d_key": 4, "d_value": 5, "k": 3, "d_in": 6, **kw})
    return cfg, MemoryBlock.init(cfg, rng)


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"n": 10}, {"k": 9}, {"k": 0}, {"d_key": 0}, {"weight_mode": "max"}, {"gating_fn": "relu"},
])
def test_config_contract(kw):
    with pytest.raises(ContractError):
        MemoryConfig(**{"n": 64, "d_key": 4, "d_value": 4, "k": 2, **kw})


def test_config_defaults():
    cfg = MemoryConfig(n=256, d_key=8, d_value=12, k=4)
    assert cfg.sqrt_n == 16 and cfg.d_in == 12 and cfg.weight_mode == "softmax"


def test_block_shapes_and_theta_identity(rng):
    cfg, blk = small_block(rng)
    blk.check(cfg)
    assert np.array_equal(blk.theta_row, np.eye(4)) and np.array_equal(blk.theta_col, np.eye(4))
    blk.key_row = np.zeros((3, 4))
    with pytest.raises(ContractError):
        blk.check(cfg)


# -- query_split -------------------------------------------------------------

def test_query_split_zero_net(rng):
    cfg, blk = small_block(rng, layernorm_qk=False)
    blk.query_w[:] = 0.0
    q_row, q_col = query_split(rng.standard_normal(6), blk, cfg)
    assert not q_row.any() and not q_col.any()


def test_query_split_identity_net(rng):
    cfg, blk = small_block(rng, d_in=8, layernorm_qk=False)
    blk.query_w[:] = np.eye(8)
    x = rng.standard_normal(8)
    q_row, q_col = query_split(x, blk, cfg)
    assert np.array_equal(q_row, x[:4]) and np.array_equal(q_col, x[4:])


def test_query_split_layernorm_statistics(rng):
    cfg, blk = small_block(rng, d_key=16)
    for _ in range(10):
        q_row, q_col = query_split(rng.standard_normal(6), blk, cfg)
        for q in (q_row, q_col):
            assert abs(q.mean()) < 1e-12
            assert abs(q.var() - 1.0) < 1e-3


def test_query_split_batch_and_mismatch(rng):
    cfg, blk = small_block(rng)
    X = rng.standard_normal((3, 6))
    q_row, _ = query_split(X, blk, cfg)
    assert q_row.shape == (3, 4)
    np.testing.assert_allclose(q_row[1], query_split(X[1], blk, cfg)[0], rtol=1e-14, atol=1e-15)
    with pytest.raises(ContractError):
        query_split(np.ones(5), blk, cfg)


# -- score_subkeys -----------------------------------------------------------

@pytest.mark.parametrize("ln", [False, True])
def test_identity_theta_matches_plain_scores_bitwise(rng, ln):
    q = rng.standard_normal(6)
    keys = rng.standard_normal((9, 6))
    a = score_subkeys(q, keys, np.eye(6), over_param=True, layernorm_qk=ln)
    b = score_subkeys(q, keys, np.eye(6), over_param=False, layernorm_qk=ln)
    assert np.array_equal(a, b)


def test_identity_keys_return_query(rng):
    q = rng.standard_normal(5)
    S = score_subkeys(q, np.eye(5), np.eye(5), over_param=True, layernorm_qk=False)
    np.testing.assert_array_equal(S, q)


@pytest.mark.parametrize("over_param,ln", [(True, True), (True, False), (False, True), (False, False)])
def test_scores_match_materialized_oracle(rng, over_param, ln):
    for _ in range(10):
        dk = int(rng.integers(2, 9))
        q = rng.standard_normal(dk)
        keys = rng.standard_normal((int(rng.integers(2, 20)), dk))
        theta = rng.standard_normal((dk, dk))
        ln_k = LayerNormParams(1 + 0.2 * rng.standard_normal(dk), 0.2 * rng.standard_normal(dk))
        got = score_subkeys(q, keys, theta, over_param, ln, ln_k=ln_k)
        ref = materialized_scores(q, keys, theta, over_param, ln_k if ln else None)
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_score_subkeys_contract(rng):
    with pytest.raises(ContractError):
        score_subkeys(np.ones(3), np.ones((4, 4)), np.eye(4), True, False)
    with pytest.raises(ContractError):
        score_subkeys(np.ones(4), np.ones((4, 4)), np.eye(3), True, False)


def test_effective_keys_apply_theta_to_each_row(rng):
    cfg, blk = small_block(rng, layernorm_qk=False)
    blk.theta_col = rng.standard_normal((4, 4))
    eff = effective_keys(blk, cfg, "col")
    for i in range(cfg.sqrt_n):
        np.testing.assert_allclose(eff[i], blk.theta_col @ blk.key_col[i], rtol=1e-13)


# -- combine_topk ------------------------------------------------------------

def test_combine_single_best():
    assert combine_topk([2.0, 0.0], [3.0, 1.0], 1) == [(0, 0, 5.0)]


def test_combine_full_tie_is_lexicographic():
    assert combine_topk([1.0, 1.0], [1.0, 1.0], 2) == [(0, 0, 2.0), (0, 1, 2.0)]


def test_combine_k_too_large():
    with pytest.raises(ContractError):
        combine_topk(np.zeros(3), np.zeros(3), 4)


def test_combine_matches_full_grid(rng):
    for _ in range(300):
        s = int(rng.integers(4, 65))
        k = int(rng.integers(1, s + 1))
        S_row, S_col = rng.standard_normal(s), rng.standard_normal(s)
        got = combine_topk(S_row, S_col, k)
        ref = brute_force_topk_pairs(S_row, S_col, k)
        assert got == ref


@settings(max_examples=200, deadline=None)
@given(
    S_row=arrays(np.float64, st.integers(1, 12), elements=st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0])),
    data=st.data(),
)
def test_combine_with_ties_respects_rules(S_row, data):
    s = S_row.shape[0]
    S_col = data.draw(arrays(np.float64, s, elements=st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0])))
    k = data.draw(st.integers(1, s))
    got = combine_topk(S_row, S_col, k)
    I = set(np.argsort(-S_row, kind="stable")[:k].tolist())
    J = set(np.argsort(-S_col, kind="stable")[:k].tolist())
    # pairs drawn from I x J, best first, ties broken lexicographically
    assert all(i in I and j in J for i, j, _ in got)
    keys = [(-sc, i, j) for i, j, sc in got]
    assert keys == sorted(keys)
    # score multiset equals the full-grid top-k even with ties
    ref = brute_force_topk_pairs(S_row, S_col, k)
    assert sorted(sc for *_, sc in got) == sorted(sc for *_, sc in ref)


# -- flat_index --------------------------------------------------------------

def test_flat_index_examples():
    assert flat_index(0, 0, 5) == 0
    assert flat_index(3, 5, 16) == 53


def test_flat_index_is_bijective():
    flats = {flat_index(i, j, 8) for i in range(8) for j in range(8)}
    assert flats == set(range(64))
    for f in range(64):
        assert flat_index(*divmod(f, 8), 8) == f


@pytest.mark.parametrize("i,j", [(-1, 0), (0, 8), (8, 0)])
def test_flat_index_out_of_range(i, j):
    with pytest.raises(ContractError):
        flat_index(i, j, 8)


# -- aggregate_values --------------------------------------------------------

@pytest.mark.parametrize("mode", ["softmax", "linear"])
def test_aggregate_single_pair(rng, mode):
    V = rng.standard_normal((16, 3))
    v, res = aggregate_values([(2, 1, 0.7)], V, mode)
    assert res.weights.tolist() == [1.0]
    assert np.array_equal(v, V[9])


def test_aggregate_equal_scores_split_evenly(rng):
    V = rng.standard_normal((16, 3))
    _, res = aggregate_values([(0, 1, 1.5), (2, 3, 1.5)], V)
    assert res.weights.tolist() == [0.5, 0.5]
    assert res.flat_indices.tolist() == [1, 11]


def test_aggregate_matches_naive_loop(rng):
    for _ in range(20):
        V = rng.standard_normal((64, 7))
        cells = rng.choice(64, size=8, replace=False)
        pairs = [(int(c // 8), int(c % 8), float(rng.standard_normal())) for c in cells]
        v, res = aggregate_values(pairs, V)
        scores = np.array([p[2] for p in pairs])
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        ref = np.zeros(7)
        for t, (i, j, _) in enumerate(pairs):
            ref = ref + w[t] * V[8 * i + j]
        np.testing.assert_allclose(res.weights, w, rtol=4 * np.finfo(float).eps)
        terms = np.abs(w[:, None] * V[cells]).sum(axis=0)
        assert np.all(np.abs(v - ref) <= 4 * 8 * np.spacing(terms))


def test_linear_weights_follow_literal_normalization():
    w = selection_weights(np.array([1.0, 3.0]), "linear")
    assert w.tolist() == [0.25, 0.75]


def test_linear_weights_degenerate_sum():
    with pytest.raises(DegenerateNormalizationError):
        selection_weights(np.array([1.0, -1.0]), "linear")


def test_aggregate_rejects_empty():
    with pytest.raises(ContractError):
        aggregate_values([], np.ones((4, 2)))


# -- memory_forward ----------------------------------------------------------

def test_forward_minimal_hand_checked():
    # n = 4, k = 2, identity query net and keys so the scores are the input itself
    cfg = MemoryConfig(n=4, d_key=2, d_value=3, k=2, d_in=4, layernorm_qk=False)
    blk = MemoryBlock.init(cfg, np.random.default_rng(0))
    blk.query_w[:] = np.eye(4)
    blk.key_row[:] = np.eye(2)
    blk.key_col[:] = np.eye(2)
    blk.values[:] = np.arange(12.0).reshape(4, 3)
    x = np.array([1.0, 0.0, 0.5, 2.0])  # S_row = [1, 0], S_col = [0.5, 2]
    v, res, _ = memory_forward(x, blk, cfg)
    # sums: (0,0)=1.5 (0,1)=3 (1,0)=0.5 (1,1)=2 -> picks (0,1) then (1,1)
    assert res.pairs == [(0, 1), (1, 1)]
    assert res.flat_indices.tolist() == [1, 3]
    w1 = np.exp(1.0) / (np.exp(1.0) + 1.0)
    np.testing.assert_allclose(res.weights, [w1, 1 - w1], rtol=1e-15)
    np.testing.assert_allclose(v, w1 * np.array([3.0, 4.0, 5.0]) + (1 - w1) * np.array([9.0, 10.0, 11.0]),
                               rtol=1e-14)


@pytest.mark.parametrize("over_param", [True, False])
def test_forward_desk_config_matches_unfactorized_oracle(over_param):
    rng = np.random.default_rng(7)
    cfg = MemoryConfig(n=64 * 64, d_key=16, d_value=16, k=8, over_param=over_param)
    blk = MemoryBlock.init(cfg, rng)
    blk.theta_row += 0.2 * rng.standard_normal((16, 16))
    blk.theta_col += 0.2 * rng.standard_normal((16, 16))
    X = rng.standard_normal((6, 16))
    v, res, _ = memory_forward(X, blk, cfg)
    for b in range(6):
        ref_v, ref_top, ref_w = unfactorized_forward(X[b], blk, cfg)
        assert res.flat_indices[b].tolist() == ref_top.tolist()
        np.testing.assert_allclose(res.weights[b], ref_w, rtol=1e-10)
        np.testing.assert_allclose(v[b], ref_v, rtol=1e-10, atol=1e-12)


def test_forward_large_scale_runs():
    rng = np.random.default_rng(0)
    cfg = MemoryConfig(n=256 * 256, d_key=32, d_value=32, k=32)
    blk = MemoryBlock.init(cfg, rng)
    v, res, _ = memory_forward(rng.standard_normal((4, 32)), blk, cfg)
    assert v.shape == (4, 32) and np.all(np.isfinite(v))
    assert res.flat_indices.shape == (4, 32)


def test_retrieval_result_invariants(rng):
    cfg, blk = small_block(rng, n=256, k=8)
    X = rng.standard_normal((20, 6))
    _, res, tape = memory_forward(X, blk, cfg)
    S_row = tape.q_row @ tape.eff_row.T
    S_col = tape.q_col @ tape.eff_col.T
    for b in range(20):
        assert len(set(res.flat_indices[b].tolist())) == cfg.k
        np.testing.assert_allclose(res.weights[b].sum(), 1.0, atol=1e-12)
        I = set(np.argsort(-S_row[b], kind="stable")[:cfg.k].tolist())
        J = set(np.argsort(-S_col[b], kind="stable")[:cfg.k].tolist())
        assert set(res.rows[b].tolist()) <= I and set(res.cols[b].tolist()) <= J
        np.testing.assert_allclose(res.raw_scores[b], S_row[b, res.rows[b]] + S_col[b, res.cols[b]], rtol=1e-12)


def test_forward_single_sample_matches_batch(rng):
    cfg, blk = small_block(rng)
    X = rng.standard_normal((3, 6))
    vb, rb, _ = memory_forward(X, blk, cfg)
    v1, r1, _ = memory_forward(X[2], blk, cfg)
    np.testing.assert_allclose(v1, vb[2], rtol=1e-14)
    assert r1.flat_indices.tolist() == rb.flat_indices[2].tolist()


@pytest.mark.parametrize("k", [1, 2, 5, 8])
def test_softmax_weights_sum_to_one(rng, k):
    cfg, blk = small_block(rng, k=k)
    _, res, _ = memory_forward(rng.standard_normal((30, 6)) * 5, blk, cfg)
    np.testing.assert_allclose(res.weights.sum(axis=1), 1.0, atol=1e-6)


def test_identity_theta_forward_bitwise_equal(rng):
    cfg_on, blk = small_block(rng)
    cfg_off = MemoryConfig(n=64, d_key=4, d_value=5, k=3, d_in=6, over_param=False)
    X = rng.standard_normal((10, 6))
    a, ra, _ = memory_forward(X, blk, cfg_on)
    b, rb, _ = memory_forward(X, blk, cfg_off)
    assert np.array_equal(a, b)
    assert np.array_equal(ra.flat_indices, rb.flat_indices)


def _shifted_forward(rng, weight_mode, c):
    cfg, blk = small_block(rng, weight_mode=weight_mode, layernorm_qk=False)
    blk.query_b[:] += 2.0  # linear mode needs score sums away from zero
    x = rng.standard_normal(6)
    # pin q_row[0] at 1 so adding c to key column 0 adds exactly c to every S_row[i]
    blk.query_w[0, :] = 0.0
    blk.query_b[0] = 1.0
    v1, r1, _ = memory_forward(x, blk, cfg)
    blk.key_row[:, 0] += c
    v2, r2, _ = memory_forward(x, blk, cfg)
    return (v1, r1), (v2, r2)


def test_softmax_shift_invariance_and_linear_counterexample():
    (v1, r1), (v2, r2) = _shifted_forward(np.random.default_rng(3), "softmax", 2.5)
    assert np.array_equal(r1.flat_indices, r2.flat_indices)
    np.testing.assert_allclose(r2.weights, r1.weights, atol=1e-9)
    np.testing.assert_allclose(v2, v1, atol=1e-9)
    (l1, q1), (l2, q2) = _shifted_forward(np.random.default_rng(3), "linear", 2.5)
    assert np.array_equal(q1.flat_indices, q2.flat_indices)
    assert np.max(np.abs(q2.weights - q1.weights)) > 1e-3


def test_forward_dimension_mismatch(rng):
    cfg, blk = small_block(rng)
    with pytest.raises(ContractError):
        memory_forward(np.ones(5), blk, cfg)


# -- gate --------------------------------------------------------------------

def test_gate_examples(rng):
    x = rng.standard_normal(6)
    assert not memory_gate(x, np.zeros(6), "tanh").any()
    np.testing.assert_array_equal(memory_gate(x, np.zeros(6), "sigmoid"), 0.5 * x)
    np.testing.assert_array_equal(memory_gate(x, np.full(6, 40.0), "tanh"), x)
    np.testing.assert_array_equal(memory_gate(x, np.ones(6), "identity"), x)


def test_gate_mismatch():
    with pytest.raises(ContractError):
        memory_gate(np.ones(3), np.ones(2))
    with pytest.raises(ContractError):
        memory_gate(np.ones(3), np.ones(3), "relu")


@pytest.mark.parametrize("fn", ["tanh", "sigmoid", "identity"])
def test_gate_gradients_match_finite_differences(rng, fn):
    for _ in range(20):
        x = rng.standard_normal(5)
        v = rng.standard_normal(5) * 2
        d = rng.standard_normal(5)
        dx, dv = grad_memory_gate(x, v, d, fn)
        f = lambda: float(d @ memory_gate(x, v, fn))
        assert rel_error(dx, numeric_grad(f, x)) < 1e-6
        assert rel_error(dv, numeric_grad(f, v)) < 1e-6


# -- backward ----------------------------------------------------------------

def test_backward_zero_upstream_gives_zero_gradients(rng):
    cfg, blk = small_block(rng)
    blk.theta_row += rng.standard_normal((4, 4))
    _, _, tape = memory_forward(rng.standard_normal((3, 6)), blk, cfg)
    d_x, g = memory_backward(tape, np.zeros((3, 5)))
    assert not d_x.any()
    assert all(not arr.any() for arr in g.as_dict().values())


def test_backward_shapes_mirror_parameters(rng):
    cfg, blk = small_block(rng)
    _, _, tape = memory_forward(rng.standard_normal(6), blk, cfg)
    d_x, g = memory_backward(tape, rng.standard_normal(5))
    assert d_x.shape == (6,)
    for name, arr in blk.parameters().items():
        assert g.as_dict()[name].shape == arr.shape
    with pytest.raises(ContractError):
        memory_backward(tape, np.ones(4))


def test_value_gradient_has_exactly_k_rows_per_sample(rng):
    cfg, blk = small_block(rng, n=256, k=6)
    for _ in range(10):
        x = rng.standard_normal(6)
        _, res, tape = memory_forward(x, blk, cfg)
        _, g = memory_backward(tape, rng.standard_normal(5))
        nz = np.flatnonzero(np.abs(g.values).sum(axis=1))
        assert sorted(nz.tolist()) == sorted(res.flat_indices.tolist())


def test_key_gradients_only_on_selected_rows_without_theta(rng):
    cfg, blk = small_block(rng, n=256, k=3, over_param=False, layernorm_qk=False)
    _, res, tape = memory_forward(rng.standard_normal(6), blk, cfg)
    _, g = memory_backward(tape, rng.standard_normal(5))
    assert set(np.flatnonzero(np.abs(g.key_row).sum(axis=1))) <= set(res.rows.tolist())
    assert set(np.flatnonzero(np.abs(g.key_col).sum(axis=1))) <= set(res.cols.tolist())
    assert not g.theta_row.any()


@pytest.mark.parametrize("over_param", [True, False])
@pytest.mark.parametrize("layernorm_qk", [True, False])
@pytest.mark.parametrize("weight_mode", ["softmax", "linear"])
def test_backward_matches_finite_differences(over_param, layernorm_qk, weight_mode):
    rng = np.random.default_rng(hash((over_param, layernorm_qk, weight_mode)) % 2**32)
    for _ in range(3):
        case = random_memory_case(rng, over_param, layernorm_qk, weight_mode)
        errors = memory_fd_errors(*case)
        assert max(errors.values()) < 1e-5, errors


def test_backward_non_affine_layernorm(rng):
    case = random_memory_case(rng, ln_affine=False)
    errors = memory_fd_errors(*case)
    assert max(errors.values()) < 1e-5, errors
    _, _, tape = memory_forward(case[2], case[1], case[0])
    _, g = memory_backward(tape, case[3])
    assert not g.ln_k_gamma.any() and not g.ln_q_beta.any()


# -- parameter accounting ----------------------------------------------------

def test_param_count_from_dims():
    cfg = MemoryConfig(n=4096, d_key=16, d_value=32, k=8, d_in=32)
    c = memory_param_count(cfg)
    dense = 2 * 16 * 32 + 2 * 16 + 2 * 64 * 16 + 2 * 16 * 16 + 4 * 16
    assert c == {"total": dense + 4096 * 32, "activated": dense, "values": 4096 * 32}
    c2 = memory_param_count(cfg, tokens=3, per_token_values=True)
    assert c2["total"] == 3 * dense + 3 * 4096 * 32 and c2["activated"] == 3 * dense
    assert memory_param_count(cfg, tokens=3)["values"] == 4096 * 32


def test_param_count_ignores_k():
    a = memory_param_count(MemoryConfig(n=4096, d_key=16, d_value=16, k=2))
    b = memory_param_count(MemoryConfig(n=4096, d_key=16, d_value=16, k=64))
    assert a == b


def test_param_count_matches_block_arrays(rng):
    for kw in ({}, {"over_param": False}, {"layernorm_qk": False}, {"ln_affine": False}):
        cfg, blk = small_block(rng, **kw)
        counted = sum(arr.size for name, arr in blk.parameters().items()
                      if not (name.startswith("theta") and not cfg.over_param)
                      and not (name.startswith("ln_") and not (cfg.layernorm_qk and cfg.ln_affine)))
        assert memory_param_count(cfg)["total"] == counted
