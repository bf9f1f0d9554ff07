import numpy as np
import pytest

from modules import tensor as tn
from modules.attention import (AttentionLayerParams, PairwiseMaps, PairwiseTables, attention_step_matrix,
                               attention_step_pairwise, attention_weights, materialize_maps, unroll_encoder)
from modules.errors import ContractError, DimensionError
from modules.tensor import Tensor


def tables(e_phi, e_psi=None, s1=1.0, s2=1.0):
    e_phi = np.asarray(e_phi, dtype=np.float64)
    e_psi = np.zeros_like(e_phi) if e_psi is None else np.asarray(e_psi, dtype=np.float64)
    return PairwiseTables(tn.parameter(e_phi), tn.parameter(e_psi),
                          tn.parameter(np.full((1, 1), np.log(s1))), tn.parameter(np.full((1, 1), np.log(s2))))


def one_hot(labels, k):
    return np.eye(k)[np.asarray(labels)]


def layer(d, rng=None, eta=0.5, identity=False):
    if identity:
        return AttentionLayerParams(tn.parameter(np.eye(d)), tn.parameter(np.eye(d)), tn.parameter(np.eye(d)), eta=eta)
    mats = [tn.parameter(rng.normal(scale=0.5, size=(d, d))) for _ in range(3)]
    return AttentionLayerParams(*mats, eta=eta)


def random_instance(rng, n, d, k=2):
    e = rng.normal(size=(k, k))
    tab = tables(e + e.T, rng.normal(size=(k, k)), s1=float(rng.uniform(0.5, 2.0)), s2=float(rng.uniform(0.1, 3.0)))
    maps = tab.bind(one_hot(rng.integers(0, k, size=n), k))
    H = tn.rowwise_l2_normalize(rng.normal(size=(n, d))).data
    return H, layer(d, rng, eta=float(rng.uniform(0.1, 0.9))), maps


class TestPairwiseMaps:
    def test_zero_table_gives_half(self):
        phi, _ = materialize_maps(tables(np.zeros((2, 2))).bind(one_hot([0, 1, 1], 2)))
        np.testing.assert_array_equal(phi.data, np.full((3, 3), 0.5))

    def test_diagonal_table(self):
        phi, _ = materialize_maps(tables([[2.0, 0.0], [0.0, -2.0]]).bind(one_hot([0, 1], 2)))
        sig = lambda x: 1.0 / (1.0 + np.exp(-x))
        expected = [[sig(2.0), 0.5], [0.5, sig(-2.0)]]
        np.testing.assert_allclose(phi.data, expected, rtol=1e-14)

    def test_symmetric_table_gives_symmetric_map(self, rng):
        e = rng.normal(size=(3, 3))
        phi, _ = materialize_maps(tables(e + e.T).bind(one_hot(rng.integers(0, 3, size=7), 3)))
        np.testing.assert_array_equal(phi.data, phi.data.T)

    def test_clamp_keeps_psi_below_phi(self):
        tab = tables([[2.0, 0.0], [0.0, -2.0]], s2=5.0)
        phi, psi = materialize_maps(tab.bind(one_hot([0, 1, 1, 0], 2)))
        assert psi.data.max() <= phi.data.min()

    def test_strict_mode_leaves_psi_unclamped(self):
        tab = tables([[2.0, 0.0], [0.0, -2.0]], s2=5.0)
        _, psi = materialize_maps(tab.bind(one_hot([0, 1], 2), strict_eq9=True))
        np.testing.assert_allclose(psi.data, np.full((2, 2), 2.5), rtol=1e-14)

    def test_fixed_psi(self):
        phi, psi = materialize_maps(tables(np.zeros((2, 2))).bind(one_hot([0, 1, 0], 2), fixed_psi=0.25))
        np.testing.assert_array_equal(phi.data, np.ones((3, 3)))
        np.testing.assert_array_equal(psi.data, np.full((3, 3), 0.25))

    def test_types_must_be_one_hot(self):
        with pytest.raises(ContractError):
            tables(np.zeros((2, 2))).bind(np.array([[0.5, 0.5], [1.0, 0.0]]))

    def test_type_width_must_match_table(self):
        with pytest.raises(DimensionError):
            tables(np.zeros((2, 2))).bind(one_hot([0, 1, 2], 3))


class TestAttentionStep:
    def test_tiny_eta_barely_moves(self, rng):
        H, p, maps = random_instance(rng, 5, 4)
        p = AttentionLayerParams(p.w_q, p.w_k, p.w_v, eta=1e-6)
        out = attention_step_matrix(Tensor(H), p, maps).data
        assert np.max(np.abs(out - H)) <= 1e-5

    def test_vanishing_psi_gives_uniform_mixing(self, rng):
        H = tn.rowwise_l2_normalize(rng.normal(size=(4, 3))).data
        maps = tables(np.zeros((2, 2)), s2=np.exp(-60.0)).bind(one_hot([0, 1, 0, 1], 2))
        out = attention_step_matrix(Tensor(H), layer(3, identity=True, eta=0.5), maps).data
        np.testing.assert_allclose(out, 0.5 * H + 0.5 * H.mean(axis=0), atol=1e-12)

    def test_matrix_matches_pairwise_small(self, rng):
        H, p, maps = random_instance(rng, 3, 2)
        np.testing.assert_allclose(attention_step_matrix(Tensor(H), p, maps).data,
                                   attention_step_pairwise(H, p, maps), atol=1e-10)

    @pytest.mark.parametrize("seed", range(20))
    def test_matrix_matches_pairwise_random(self, seed):
        rng = np.random.default_rng(seed)
        n, heads = int(rng.integers(1, 33)), int(rng.integers(1, 3))
        H, p, maps = random_instance(rng, n, 4 * heads)
        matrix = attention_step_matrix(Tensor(H), p, maps, num_heads=heads).data
        assert np.max(np.abs(matrix - attention_step_pairwise(H, p, maps, num_heads=heads))) <= 1e-10

    def test_permutation_equivariance(self, rng):
        H, p, maps = random_instance(rng, 9, 4)
        perm = rng.permutation(9)
        out = attention_step_matrix(Tensor(H), p, maps).data
        permuted_maps = PairwiseMaps(maps.tables, maps.z[perm])
        permuted_out = attention_step_matrix(Tensor(H[perm]), p, permuted_maps).data
        np.testing.assert_allclose(permuted_out, out[perm], atol=1e-12)

    def test_weights_are_row_stochastic(self, rng):
        H, p, maps = random_instance(rng, 8, 4)
        W = attention_weights(H, p, maps)
        assert np.all(W > 0)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)

    def test_batched_input_matches_single(self, rng):
        H, p, maps = random_instance(rng, 5, 4)
        stacked = np.stack([H, H[::-1]])
        batch_maps = PairwiseMaps(maps.tables, np.stack([maps.z, maps.z[::-1]]))
        out = attention_step_matrix(Tensor(stacked), p, batch_maps).data
        np.testing.assert_allclose(out[0], attention_step_matrix(Tensor(H), p, maps).data, atol=1e-14)

    @pytest.mark.parametrize("num_heads", [1, 2])
    def test_step_gradients_match_central_differences(self, num_heads, rng):
        H, p, maps = random_instance(rng, 5, 4)
        target = rng.normal(size=H.shape)

        def build(v):
            step = AttentionLayerParams(v["w_q"], v["w_k"], v["w_v"], eta=p.eta)
            out = attention_step_matrix(v["H"], step, maps, num_heads=num_heads)
            return tn.sum_all((out - target) * (out - target))

        values = {"H": H.copy(), "w_q": p.w_q.data.copy(), "w_k": p.w_k.data.copy(), "w_v": p.w_v.data.copy()}
        errors = tn.gradient_check(build, values, step=1e-5)
        assert max(errors.values()) <= 1e-4, errors

    def test_non_positive_normalizer_is_reported(self):
        h = np.array([1.0, 0.0])
        H = np.stack([h, -h, -h])
        maps = tables(np.zeros((2, 2)), s2=4.0).bind(one_hot([0, 0, 1], 2), strict_eq9=True)
        p = layer(2, identity=True)
        with pytest.raises(ContractError):
            attention_step_matrix(Tensor(H), p, maps)
        with pytest.raises(ContractError):
            attention_step_pairwise(H, p, maps)

    def test_shape_mismatch(self, rng):
        H, p, maps = random_instance(rng, 4, 4)
        with pytest.raises(DimensionError):
            attention_step_matrix(Tensor(H[:, :3]), p, maps)
        with pytest.raises(DimensionError):
            attention_step_matrix(Tensor(H[:3]), p, maps)

    def test_heads_must_divide_width(self, rng):
        H, p, maps = random_instance(rng, 4, 4)
        with pytest.raises(ContractError):
            attention_step_matrix(Tensor(H), p, maps, num_heads=3)

    def test_eta_range(self):
        with pytest.raises(ContractError):
            layer(2, identity=True, eta=1.0)


class TestUnroll:
    def test_matches_manual_steps(self, rng):
        H, _, maps = random_instance(rng, 6, 4)
        params = [layer(4, rng) for _ in range(3)]
        seq = unroll_encoder(Tensor(H), params, maps, T=3, normalize=False)
        manual = Tensor(H)
        for t, p in enumerate(params):
            manual = attention_step_matrix(manual, p, maps)
            np.testing.assert_array_equal(seq[t].data, manual.data)

    def test_tied_steps_reuse_parameters(self, rng):
        H, p, maps = random_instance(rng, 5, 4)
        tied = unroll_encoder(Tensor(H), [p], maps, T=4)
        untied = unroll_encoder(Tensor(H), [p] * 4, maps, T=4)
        for a, b in zip(tied, untied):
            np.testing.assert_array_equal(a.data, b.data)

    def test_normalized_rows(self, rng):
        H, p, maps = random_instance(rng, 7, 4)
        for step in unroll_encoder(Tensor(H), [p], maps, T=3):
            np.testing.assert_allclose(np.linalg.norm(step.data, axis=1), 1.0, atol=1e-14)

    def test_identical_rows_are_a_fixed_point(self):
        H = np.tile([0.6, 0.8], (4, 1))
        maps = tables(np.zeros((2, 2))).bind(one_hot([0, 1, 0, 1], 2))
        seq = unroll_encoder(Tensor(H), [layer(2, identity=True)], maps, T=5)
        for step in seq:
            np.testing.assert_allclose(step.data, H, atol=1e-14)

    def test_disabled_returns_input(self, rng):
        H, p, maps = random_instance(rng, 3, 4)
        h0 = Tensor(H)
        seq = unroll_encoder(h0, [p], maps, T=3, enabled=False)
        assert len(seq) == 3 and all(step is h0 for step in seq)

    def test_parameter_count_checked(self, rng):
        H, p, maps = random_instance(rng, 3, 4)
        with pytest.raises(ContractError):
            unroll_encoder(Tensor(H), [p, p], maps, T=3)

    def test_horizon_positive(self, rng):
        H, p, maps = random_instance(rng, 3, 4)
        with pytest.raises(ContractError):
            unroll_encoder(Tensor(H), [p], maps, T=0)
