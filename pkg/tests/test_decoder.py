import numpy as np
import pytest

from modules import tensor as tn
from modules.decoder import (MLP_MODES, EGNNLayerParams, MLPReadout, ObservedGraph, decode_step, decode_trajectory,
                             edge_messages, egnn_layer, readout_trajectory)
from modules.errors import ContractError, GraphError
from modules.geometry import apply, apply_to_velocity, random_permutation, random_transform
from modules.tensor import Tensor

D = 6


def stack(rng, edge_dim=2, layers=2, zero_heads=False):
    return [EGNNLayerParams.init(D, edge_dim, rng, with_velocity=(l == 0), zero_heads=zero_heads, name=f"decoder.{l}")
            for l in range(layers)]


def random_graph(n, rng, edge_dim=2, extra=3):
    pairs = {(i, i + 1) for i in range(n - 1)}
    for _ in range(extra):
        i, j = sorted(rng.choice(n, size=2, replace=False))
        pairs.add((int(i), int(j)))
    pairs = sorted(pairs)
    return ObservedGraph.undirected(n, pairs, rng.uniform(0.5, 1.5, size=(len(pairs), edge_dim)))


def inputs(n, rng):
    return Tensor(rng.normal(size=(n, D))), Tensor(rng.normal(size=(n, 3))), Tensor(rng.normal(size=(n, 3)))


class TestObservedGraph:
    def test_dangling_edge(self):
        with pytest.raises(GraphError):
            ObservedGraph(3, np.array([[0, 3]]), np.zeros((1, 0)))

    def test_self_loop(self):
        with pytest.raises(GraphError):
            ObservedGraph(3, np.array([[1, 1]]), np.zeros((1, 0)))

    def test_attribute_rows_must_match_edges(self):
        with pytest.raises(GraphError):
            ObservedGraph(3, np.array([[0, 1], [1, 0]]), np.zeros((1, 2)))

    def test_undirected_is_symmetric(self, chain_graph):
        assert chain_graph.is_symmetric()
        assert chain_graph.n_edges == 6
        np.testing.assert_array_equal(chain_graph.degree(), [1.0, 2.0, 2.0, 1.0])

    def test_one_directed_edge_is_not_symmetric(self):
        assert not ObservedGraph(2, np.array([[0, 1]]), np.zeros((1, 0))).is_symmetric()

    def test_empty_graph(self):
        g = ObservedGraph(4)
        assert g.n_edges == 0 and g.edge_dim == 0
        np.testing.assert_array_equal(g.degree(), np.zeros(4))


class TestEGNNLayer:
    def test_zero_heads_return_initial_positions(self, rng):
        g = random_graph(5, rng)
        H, X, V = inputs(5, rng)
        out = decode_step(H, X, V, g, stack(rng, zero_heads=True))
        np.testing.assert_array_equal(out.data, X.data)

    def test_isolated_node_keeps_position_without_velocity(self, rng):
        g = ObservedGraph.undirected(3, [(0, 1)], np.ones((1, 2)))
        H, X, _ = inputs(3, rng)
        out = decode_step(H, X, Tensor(np.zeros((3, 3))), g, stack(rng))
        np.testing.assert_array_equal(out.data[2], X.data[2])

    def test_zero_velocity_matches_no_velocity(self, rng):
        g = random_graph(5, rng)
        H, X, _ = inputs(5, rng)
        p = stack(rng, layers=1)[0]
        with_zero = egnn_layer(X, H, g, p, V=Tensor(np.zeros((5, 3))))
        without = egnn_layer(X, H, g, p, V=None)
        for a, b in zip(with_zero, without):
            np.testing.assert_array_equal(a.data, b.data)

    def test_mean_equals_sum_at_unit_degree(self, rng):
        g = ObservedGraph.undirected(2, [(0, 1)], np.ones((1, 2)))
        H, X, V = inputs(2, rng)
        s = stack(rng)
        np.testing.assert_array_equal(decode_step(H, X, V, g, s, aggr="sum").data,
                                      decode_step(H, X, V, g, s, aggr="mean").data)

    def test_messages_are_exactly_translation_invariant(self, rng):
        g = random_graph(6, rng)
        H = Tensor(rng.normal(size=(6, D)))
        X = np.round(rng.uniform(-4, 4, size=(6, 3)) * 64) / 64
        shift = np.array([1.5, -0.25, 3.125])
        p = stack(rng, layers=1)[0]
        m1, _ = edge_messages(Tensor(X), H, g, p)
        m2, _ = edge_messages(Tensor(X + shift), H, g, p)
        np.testing.assert_array_equal(m1.data, m2.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_rigid_motion_commutes(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(7, rng)
        H, X, V = inputs(7, rng)
        s = stack(rng)
        t = random_transform(rng=rng)
        out = decode_step(H, X, V, g, s).data
        moved = decode_step(H, Tensor(apply(t, X.data)), Tensor(apply_to_velocity(t, V.data)), g, s).data
        np.testing.assert_allclose(moved, apply(t, out), atol=1e-10)

    def test_permutation_commutes(self, rng):
        g = random_graph(8, rng)
        H, X, V = inputs(8, rng)
        s = stack(rng)
        perm = random_permutation(8, rng=rng)
        out = decode_step(H, X, V, g, s).data
        permuted = decode_step(Tensor(perm.apply(H.data)), Tensor(perm.apply(X.data)), Tensor(perm.apply(V.data)),
                               g.permuted(perm), s).data
        np.testing.assert_allclose(permuted, perm.apply(out), atol=1e-12)

    def test_node_count_mismatch(self, rng):
        g = random_graph(4, rng)
        H, X, V = inputs(5, rng)
        with pytest.raises(GraphError):
            decode_step(H, X, V, g, stack(rng))

    def test_positions_must_be_three_dimensional(self, rng):
        g = random_graph(4, rng)
        H, _, V = inputs(4, rng)
        with pytest.raises(ContractError):
            decode_step(H, Tensor(rng.normal(size=(4, 2))), V, g, stack(rng))

    def test_edge_width_mismatch(self, rng):
        g = random_graph(4, rng, edge_dim=3)
        H, X, V = inputs(4, rng)
        with pytest.raises(ContractError):
            decode_step(H, X, V, g, stack(rng, edge_dim=2))

    def test_empty_stack(self, rng):
        g = random_graph(4, rng)
        H, X, V = inputs(4, rng)
        with pytest.raises(ContractError):
            decode_step(H, X, V, g, [])

    @pytest.mark.parametrize("aggr", ["sum", "mean"])
    def test_layer_gradients_match_central_differences(self, aggr, rng):
        g = random_graph(4, rng)
        p = stack(rng, layers=1)[0]
        H, X, V = inputs(4, rng)
        target_x, target_h = rng.normal(size=(4, 3)), rng.normal(size=(4, D))

        def build(v):
            X_next, H_next = egnn_layer(v["X"], v["H"], g, p, aggr=aggr, V=v["V"])
            return tn.sum_all((X_next - target_x) * (X_next - target_x)) + tn.sum_all(H_next * target_h)

        values = {"X": X.data.copy(), "H": H.data.copy(), "V": V.data.copy()}
        errors = tn.gradient_check(build, values, step=1e-5)
        assert max(errors.values()) <= 1e-4, errors


class TestDecodeTrajectory:
    def sequence(self, rng, n=5, T=4):
        g = random_graph(n, rng)
        _, X, V = inputs(n, rng)
        H_seq = [Tensor(rng.normal(size=(n, D))) for _ in range(T)]
        return H_seq, X, V, g, stack(rng)

    def test_threaded_matches_serial(self, rng):
        H_seq, X, V, g, s = self.sequence(rng)
        serial = decode_trajectory(H_seq, X, V, g, s)
        threaded = decode_trajectory(H_seq, X, V, g, s, parallel=True)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.data, b.data)

    def test_steps_are_independent_of_order(self, rng):
        H_seq, X, V, g, s = self.sequence(rng)
        forward = decode_trajectory(H_seq, X, V, g, s)
        backward = decode_trajectory(H_seq[::-1], X, V, g, s)[::-1]
        for a, b in zip(forward, backward):
            np.testing.assert_array_equal(a.data, b.data)

    def test_recurrent_chains_predictions(self, rng):
        H_seq, X, V, g, s = self.sequence(rng, T=3)
        frames = decode_trajectory(H_seq, X, V, g, s, mode="recurrent")
        expected = decode_step(H_seq[1], frames[0], V, g, s)
        np.testing.assert_array_equal(frames[1].data, expected.data)

    def test_batched_positions(self, rng):
        H_seq, X, V, g, s = self.sequence(rng, T=2)
        X2 = Tensor(np.stack([X.data, X.data + 1.0]))
        V2 = Tensor(np.stack([V.data, V.data]))
        H2 = [Tensor(np.stack([h.data, h.data])) for h in H_seq]
        batched = decode_trajectory(H2, X2, V2, g, s)
        single = decode_trajectory(H_seq, X, V, g, s)
        for b, one in zip(batched, single):
            np.testing.assert_allclose(b.data[0], one.data, atol=1e-12)

    def test_needs_embeddings(self, rng):
        _, X, V, g, s = self.sequence(rng)
        with pytest.raises(ContractError):
            decode_trajectory([], X, V, g, s)


class TestMLPReadout:
    @pytest.mark.parametrize("mode", MLP_MODES)
    def test_zero_heads_return_initial_positions(self, mode, rng):
        H, X, _ = inputs(5, rng)
        readout = MLPReadout.init(D, mode, rng, zero_heads=True)
        np.testing.assert_array_equal(readout(H, X).data, X.data)

    @pytest.mark.parametrize("mode", MLP_MODES)
    def test_batched_matches_single(self, mode, rng):
        H, X, _ = inputs(5, rng)
        readout = MLPReadout.init(D, mode, rng, zero_heads=False)
        out = readout(Tensor(np.stack([H.data, H.data[::-1]])), Tensor(np.stack([X.data, X.data + 1.0])))
        assert out.shape == (2, 5, 3)
        np.testing.assert_allclose(out.data[0], readout(H, X).data, atol=1e-12)

    def test_only_add_mode_has_a_lift(self, rng):
        add = [name for name, _ in MLPReadout.init(D, "mlp_add", rng).tensors()]
        concat = [name for name, _ in MLPReadout.init(D, "mlp_concat", rng).tensors()]
        assert add[0] == "lift" and "lift" not in concat
        assert len(add) == len(concat) + 1

    def test_unknown_mode(self, rng):
        with pytest.raises(ContractError):
            MLPReadout.init(D, "parallel", rng)

    def test_positions_must_be_three_dimensional(self, rng):
        H, _, _ = inputs(4, rng)
        readout = MLPReadout.init(D, "mlp_concat", rng)
        with pytest.raises(ContractError):
            readout(H, Tensor(np.zeros((4, 2))))

    def test_trajectory_has_one_frame_per_embedding(self, rng):
        H_seq = [Tensor(rng.normal(size=(4, D))) for _ in range(3)]
        X = Tensor(rng.normal(size=(4, 3)))
        readout = MLPReadout.init(D, "mlp_add", rng, zero_heads=False)
        frames = readout_trajectory(H_seq, X, readout)
        assert len(frames) == 3
        np.testing.assert_array_equal(frames[1].data, readout(H_seq[1], X).data)

    def test_trajectory_needs_embeddings(self, rng):
        with pytest.raises(ContractError):
            readout_trajectory([], Tensor(np.zeros((2, 3))), MLPReadout.init(D, "mlp_add", rng))
