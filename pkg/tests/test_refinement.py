"""Factored residual algebra, parameter accounting, Jacobi singular values."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfsk.errors import ContractError
from rfsk.generator import GeneratorConfig
from rfsk.refinement import (FULLSCALE_CHANNELS, ResidualFactors,
                             _round_robin_rounds, apply_residual,
                             compose_residual, count_trainables,
                             fullscale_channel_table, jacobi_singular_values,
                             scale_tokens, toy_channel_table)
from rfsk.rng import Rng
from rfsk.tensor import Tensor


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


# ---------------------------------------------------------------------------
# factor algebra
# ---------------------------------------------------------------------------


def test_scale_tokens_scales_rows():
    rng = Rng(1)
    p, q = _t(rng.child("p").normal((3, 5))), _t(rng.child("q").normal((3, 4)))
    a, b = _t([1.0, 2.0, -0.5]), _t([0.1, 1.0, 3.0])
    ps, qs = scale_tokens(p, q, a, b)
    assert np.allclose(ps.data, p.data * a.data[:, None])
    assert np.allclose(qs.data, q.data * b.data[:, None])


def test_scale_tokens_contracts():
    p, q = _t(np.zeros((3, 5))), _t(np.zeros((2, 4)))
    v3, v2 = _t(np.zeros(3)), _t(np.zeros(2))
    with pytest.raises(ContractError):
        scale_tokens(p, q, v3, v2)
    with pytest.raises(ContractError):
        scale_tokens(p, _t(np.zeros((3, 4))), v2, v3)


def test_compose_residual_matches_einsum():
    rng = Rng(2)
    p, q = _t(rng.child("p").normal((4, 6))), _t(rng.child("q").normal((4, 5)))
    dw = compose_residual(p, q)
    assert dw.shape == (6, 5)
    assert np.allclose(dw.data, np.einsum("lo,li->oi", p.data, q.data),
                       atol=1e-6)
    with pytest.raises(ContractError):
        compose_residual(p, _t(np.zeros((3, 5))))


@pytest.mark.parametrize("rank", [1, 2, 4, 8])
def test_compose_residual_rank_bound(rank):
    # LAPACK SVD is the oracle: singular values past the token count vanish
    rng = Rng(rank)
    p = rng.child("p").normal((rank, 16), dtype=np.float64)
    q = rng.child("q").normal((rank, 12), dtype=np.float64)
    sigma = np.linalg.svd(p.T @ q, compute_uv=False)
    assert sigma[rank:].max(initial=0.0) < 1e-6 * sigma[0]
    assert sigma[:rank].min() > 1e-6 * sigma[0]  # generic factors reach L


def test_apply_residual_uniform_over_taps():
    rng = Rng(3)
    k = _t(rng.child("k").normal((4, 3, 3, 3)))
    dw = _t(rng.child("d").normal((4, 3)))
    out = apply_residual(k, dw).data
    for i in range(3):
        for j in range(3):
            assert np.allclose(out[:, :, i, j] - k.data[:, :, i, j], dw.data,
                               atol=1e-6)
    with pytest.raises(ContractError):
        apply_residual(k, _t(np.zeros((3, 3))))
    with pytest.raises(ContractError):
        apply_residual(_t(np.zeros((4, 3))), dw)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def test_count_trainables_single_layer():
    assert count_trainables([(8, 6)], 4) == 4 * (8 + 6) + 2 * 4
    assert count_trainables([(8, 6)], 4, include_scaling=False) == 4 * (8 + 6)
    assert count_trainables({2: (8, 6), 5: (4, 4)}, 2) == (
        2 * (8 + 6) + 4 + 2 * (4 + 4) + 4)


def test_count_trainables_contracts():
    with pytest.raises(ContractError):
        count_trainables([], 4)
    with pytest.raises(ContractError):
        count_trainables([(8, 6)], 0)
    with pytest.raises(ContractError):
        count_trainables([(0, 6)], 2)


@given(st.integers(1, 64), st.integers(1, 64),
       st.lists(st.tuples(st.integers(1, 512), st.integers(1, 512)),
                min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_count_trainables_linear_in_rank(r1, r2, pairs):
    f = lambda r: count_trainables(pairs, r)
    assert f(r1) + f(r2) == f(r1 + r2)


def test_fullscale_table_structure():
    table = fullscale_channel_table()
    assert len(table) == 17
    assert len(FULLSCALE_CHANNELS) == 9
    assert table[0] == (512, 512)
    # the first conv of each block bridges from the previous block's width
    assert table[8] == (512, 512)     # second 64px conv
    assert table[9] == (256, 512)     # first 128px conv bridges 512 -> 256
    assert table[10] == (256, 256)
    assert table[15] == (32, 64)      # first 1024px conv bridges 64 -> 32
    assert table[16] == (32, 32)
    assert sum(co + ci for co, ci in table.values()) == 11616


def test_fullscale_parameter_count():
    # rank-256 refinement of every conv in the 1024px schedule
    assert count_trainables(fullscale_channel_table(), 256) == 2_982_400


def test_toy_channel_table():
    cfg = GeneratorConfig()
    table = toy_channel_table(cfg, [0, 3, 6])
    assert table == {0: (64, 64), 3: (32, 64), 6: (16, 16)}
    with pytest.raises(ContractError):
        toy_channel_table(cfg, [7])


# ---------------------------------------------------------------------------
# trainable-state form
# ---------------------------------------------------------------------------


def test_residual_factors_create_shapes_and_init():
    table = {1: (16, 32), 4: (8, 16)}
    rf = ResidualFactors.create(table, rank=4, rng=Rng(10))
    assert sorted(rf.layers) == [1, 4]
    lf = rf.layers[1]
    assert lf.p.shape == (4, 16) and lf.q.shape == (4, 32)
    assert np.all(lf.a.data == np.float32(1e-3))
    assert np.all(lf.b.data == np.float32(1e-3))
    assert all(t.requires_grad for t in rf.parameters())
    assert len(rf.parameters()) == 8
    assert rf.count_trainables() == count_trainables(table, 4)


def test_residual_factors_scaling_flag():
    rf = ResidualFactors.create({0: (8, 8)}, rank=2, rng=Rng(10),
                                learnable_scaling=False)
    assert len(rf.parameters()) == 2
    assert not rf.layers[0].a.requires_grad
    assert rf.count_trainables() == 2 * (8 + 8)


def test_residual_factors_rank_bound_enforced():
    with pytest.raises(ContractError):
        ResidualFactors.create({0: (4, 64)}, rank=8, rng=Rng(10))


def test_residual_factors_deltas_match_manual():
    rf = ResidualFactors.create({2: (6, 5)}, rank=3, rng=Rng(11))
    lf = rf.layers[2]
    want = (lf.p.data * lf.a.data[:, None]).T @ (lf.q.data * lf.b.data[:, None])
    deltas = rf.deltas()
    assert list(deltas) == [2]
    assert np.allclose(deltas[2].data, want, atol=1e-8)


def test_residual_factors_deterministic():
    table = {0: (8, 8), 1: (8, 8)}
    a = ResidualFactors.create(table, rank=2, rng=Rng(12))
    b = ResidualFactors.create(table, rank=2, rng=Rng(12))
    c = ResidualFactors.create(table, rank=2, rng=Rng(13))
    assert a.checksum() == b.checksum() != c.checksum()


def test_residual_factors_array_round_trip():
    rf = ResidualFactors.create({0: (8, 8), 3: (4, 8)}, rank=2, rng=Rng(14))
    back = ResidualFactors.from_arrays(rf.to_arrays(), rank=2)
    assert back.checksum() == rf.checksum()
    partial = {k: v for k, v in rf.to_arrays().items() if not k.endswith(".a")}
    with pytest.raises(ContractError):
        ResidualFactors.from_arrays(partial, rank=2)


# ---------------------------------------------------------------------------
# Jacobi singular values
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 4, 5, 8, 17])
def test_round_robin_covers_all_pairs(n):
    seen = set()
    for ps, qs in _round_robin_rounds(n):
        batch = list(zip(ps.tolist(), qs.tolist()))
        cols = [c for pair in batch for c in pair]
        assert len(cols) == len(set(cols))  # disjoint within a round
        for p, q in batch:
            assert p < q
            seen.add((p, q))
    assert seen == {(p, q) for p in range(n) for q in range(p + 1, n)}


@pytest.mark.parametrize("shape", [(5, 5), (9, 4), (4, 9), (32, 90), (90, 32)])
def test_jacobi_matches_lapack(shape):
    for seed in range(3):
        a = Rng(seed).normal(shape, dtype=np.float64)
        got = jacobi_singular_values(a)
        want = np.linalg.svd(a, compute_uv=False)
        assert got.shape == want.shape
        assert np.all(np.diff(got) <= 1e-12)
        assert np.linalg.norm(got - want) < 1e-10 * np.linalg.norm(want)


def test_jacobi_batch_consistent_with_single():
    batch = Rng(5).normal((6, 7, 12), dtype=np.float64)
    got = jacobi_singular_values(batch)
    assert got.shape == (6, 7)
    for i in range(6):
        assert np.allclose(got[i], jacobi_singular_values(batch[i]), atol=1e-12)


def test_jacobi_power_law_spectrum():
    # conditioning like the modulated kernels it will be fed
    rng = Rng(6)
    sigma = np.arange(1, 33, dtype=np.float64) ** -1.5
    u, _ = np.linalg.qr(rng.child("u").normal((40, 32), dtype=np.float64))
    v, _ = np.linalg.qr(rng.child("v").normal((90, 32), dtype=np.float64))
    a = (u * sigma) @ v.T  # [40, 90] with rank 32
    got = jacobi_singular_values(a)
    assert got.shape == (40,)
    assert np.allclose(got[:32], sigma, rtol=1e-10)
    assert got[32:].max() < 1e-7 * sigma[0]


def test_jacobi_vectors_are_principal_directions():
    rng = Rng(7)
    x = rng.normal((200, 24), dtype=np.float64) * np.linspace(3.0, 0.2, 24)
    sig, vecs = jacobi_singular_values(x, want_vectors=True)
    _, s_ref, vt = np.linalg.svd(x, full_matrices=False)
    assert np.allclose(sig, s_ref, atol=1e-10)
    cos = np.abs(np.einsum("dk,dk->k", vecs, vt.T))
    assert cos.min() > 1.0 - 1e-8
    # orthonormal basis
    assert np.allclose(vecs.T @ vecs, np.eye(24), atol=1e-10)


def test_jacobi_ndim_contract():
    with pytest.raises(ContractError):
        jacobi_singular_values(np.zeros(4))
    with pytest.raises(ContractError):
        jacobi_singular_values(np.zeros((2, 2, 2, 2)))
