import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alakd import tensor as tn
from alakd.ala import (
    AsrModel, BlockPartition, MhaAll, MhaBlockMean, MhaSelected, WeightedSum, ala_fuse,
    block_attention_stats, block_mean, init_ala_weights, layer_similarity,
    layer_similarity_from_stacks, partition_layers, strategy_from_dict, strategy_to_dict,
)
from alakd.data import collate
from alakd.model import ModelConfig, encode
from alakd.tensor import Graph, Tensor, check_gradients


def fig2_like_matrix(n=12):
    """Within {1-6} and {7-11} 0.9, across 0.4, layer 12 at 0.2 to everything."""
    m = np.full((n, n), 0.4)
    m[:6, :6] = 0.9
    m[6:11, 6:11] = 0.9
    m[11, :] = m[:, 11] = 0.2
    np.fill_diagonal(m, 1.0)
    return m


def random_stack(rng, L=4, b=1, t=5, d=8):
    return [Tensor(rng.standard_normal((b, t, d))) for _ in range(L)]


class TestSimilarity:
    def test_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        stacks = [rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 2, 5))]
        oracle = np.zeros((3, 3))
        frames = 0
        for s in stacks:
            for t in range(s.shape[1]):
                frames += 1
                for i in range(3):
                    for j in range(3):
                        u, v = s[i, t], s[j, t]
                        oracle[i, j] += u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        oracle /= frames
        np.testing.assert_allclose(layer_similarity_from_stacks(stacks), oracle, atol=1e-10)

    def test_matrix_contract(self):
        rng = np.random.default_rng(1)
        sim = layer_similarity_from_stacks([rng.standard_normal((5, 6, 4)) for _ in range(3)])
        np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-9)
        np.testing.assert_allclose(sim, sim.T, atol=1e-9)
        assert (np.abs(sim) <= 1).all()

    def test_identity_stack_all_ones(self):
        s = np.random.default_rng(2).standard_normal((1, 7, 4))
        sim = layer_similarity_from_stacks([np.repeat(s, 4, axis=0)])
        np.testing.assert_allclose(sim, 1.0, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            layer_similarity_from_stacks([])
        with pytest.raises(ValueError):
            layer_similarity([], ModelConfig(), {})

    def test_from_model(self):
        cfg = ModelConfig(enc_layers=3, d_model=16, n_heads=2, d_ff=32)
        model = AsrModel.create(cfg)
        rng = np.random.default_rng(3)
        sim = layer_similarity([rng.standard_normal((6, 16)), rng.standard_normal((4, 16))], cfg, model.weights)
        assert sim.shape == (3, 3)
        np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-9)


class TestPartition:
    def test_all_ones_single_block(self):
        assert partition_layers(np.ones((6, 6))).blocks == ((1, 6),)

    def test_identity_gives_singletons(self):
        assert partition_layers(np.eye(5)).blocks == tuple((i, i) for i in range(1, 6))

    def test_fig2_structure(self):
        assert partition_layers(fig2_like_matrix(), 0.75).blocks == ((1, 6), (7, 11), (12, 12))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.integers(0, 10_000), st.floats(-0.9, 0.9))
    def test_always_covers(self, n, seed, thr):
        a = np.random.default_rng(seed).uniform(-1, 1, (n, n))
        sim = (a + a.T) / 2
        np.fill_diagonal(sim, 1)
        part = partition_layers(sim, thr)
        covered = [l for k in range(part.k) for l in part.layers(k)]
        assert covered == list(range(1, n + 1))

    def test_invalid_partitions(self):
        with pytest.raises(ValueError):
            BlockPartition(((1, 2), (4, 5)))
        with pytest.raises(ValueError):
            BlockPartition(())

    def test_representatives_match_table_rows(self):
        part = BlockPartition(((1, 6), (7, 11), (12, 12)))
        assert part.representatives("first") == (1, 7, 12)
        assert part.representatives("last") == (6, 11, 12)
        assert part.representatives("middle") == (3, 9, 12)


class TestBlockMean:
    def test_singleton(self):
        states = random_stack(np.random.default_rng(0))
        out = block_mean(states, BlockPartition(((1, 1), (2, 4))))
        np.testing.assert_array_equal(out[0].data, states[0].data)

    def test_identical_layers(self):
        s = Tensor(np.random.default_rng(1).standard_normal((1, 3, 4)))
        out = block_mean([s, s], BlockPartition(((1, 2),)))
        np.testing.assert_allclose(out[0].data, s.data, atol=1e-15)

    def test_summation_oracle(self):
        states = random_stack(np.random.default_rng(2), L=5)
        out = block_mean(states, BlockPartition(((1, 3), (4, 5))))
        oracle = (states[0].data + states[1].data + states[2].data) / 3
        np.testing.assert_allclose(out[0].data, oracle, atol=1e-12)

    def test_whole_stack_is_arithmetic_mean(self):
        states = random_stack(np.random.default_rng(3), L=6)
        out = block_mean(states, BlockPartition.single(6))
        np.testing.assert_allclose(out[0].data, np.mean([s.data for s in states], axis=0), atol=1e-12)


def ala_weights(d=8, L=4, seed=0):
    return init_ala_weights(ModelConfig(enc_layers=L, d_model=d, n_heads=2, d_ff=16), seed)


class TestFuse:
    STRATEGIES = [
        WeightedSum(),
        MhaAll(),
        MhaSelected((1, 3, 4)),
        MhaBlockMean(BlockPartition(((1, 2), (3, 3), (4, 4)))),
    ]

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_shape(self, strategy):
        states = random_stack(np.random.default_rng(0), b=2, t=6)
        assert ala_fuse(states, strategy, ala_weights(), 2).shape == (2, 6, 8)

    def test_weighted_sum_one_hot(self):
        states = random_stack(np.random.default_rng(1))
        w = ala_weights()
        w["ala.ws"].data[:] = [-1e4, -1e4, -1e4, 0.0]
        np.testing.assert_array_equal(ala_fuse(states, WeightedSum(), w, 2).data, states[-1].data)

    def test_selected_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            ala_fuse(random_stack(np.random.default_rng(0)), MhaSelected((1, 5)), ala_weights(), 2)

    def test_selected_must_increase(self):
        with pytest.raises(ValueError):
            MhaSelected((3, 1))

    def test_hand_rolled_attention_oracle(self):
        rng = np.random.default_rng(4)
        d, t = 8, 5
        states = random_stack(rng, L=4, t=t, d=d)
        part = BlockPartition(((1, 2), (3, 4)))
        w = ala_weights(d)
        for p in "qkvo":
            w[f"ala.attn.w{p}"].data[:] = np.eye(d)
            w[f"ala.attn.b{p}"].data[:] = 0
        out = ala_fuse(states, MhaBlockMean(part), w, 1, normalize=False).data[0]
        pe = np.array([[math.sin(tt / 10000 ** (2 * (i // 2) / d)) if i % 2 == 0 else
                        math.cos(tt / 10000 ** (2 * (i // 2) / d)) for i in range(d)] for tt in range(t)])
        e = [s.data[0] for s in states]
        z = [(e[0] + e[1]) / 2 + pe, (e[2] + e[3]) / 2 + pe]
        for tt in range(t):
            q = e[3][tt]
            scores = np.array([q @ zk[tt] / math.sqrt(d) for zk in z])
            alpha = np.exp(scores - scores.max())
            alpha /= alpha.sum()
            expect = q + sum(a * zk[tt] for a, zk in zip(alpha, z))
            np.testing.assert_allclose(out[tt], expect, atol=1e-10)

    def test_block_weights_are_distributions(self):
        states = random_stack(np.random.default_rng(5), b=2, t=7)
        part = BlockPartition(((1, 1), (2, 3), (4, 4)))
        _, bw = ala_fuse(states, MhaBlockMean(part), ala_weights(), 2, return_weights=True)
        assert bw.shape == (2, 7, 3)
        assert (bw >= 0).all()
        np.testing.assert_allclose(bw.sum(-1), 1.0, atol=1e-6)

    def test_time_permutation_equivariance_without_positions(self):
        rng = np.random.default_rng(6)
        states = random_stack(rng, t=6)
        perm = rng.permutation(6)
        strategy = MhaBlockMean(BlockPartition(((1, 2), (3, 4))))
        w = ala_weights()
        out = ala_fuse(states, strategy, w, 2, positions=False).data
        permuted = [Tensor(s.data[:, perm]) for s in states]
        out_p = ala_fuse(permuted, strategy, w, 2, positions=False).data
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_gradient(self, strategy):
        rng = np.random.default_rng(7)
        L, d = 4, 8
        w = ala_weights(d, L)
        names = [k for k in w if k.startswith("ala.")]
        layers = [rng.standard_normal((1, 3, d)) for _ in range(L)]
        target = rng.standard_normal((1, 3, d))

        def loss(*args):
            states = args[:L]
            ws = dict(zip(names, args[L:]))
            return (ala_fuse(list(states), strategy, ws, 2) * target).sum()

        rep = check_gradients(loss, layers + [w[n].data for n in names], max_elements=10)
        assert rep.passed, rep

    def test_frozen_encoder_gets_zero_gradient(self):
        cfg = ModelConfig(enc_layers=2, dec_layers=1, d_model=8, n_heads=2, d_ff=16, vocab_size=7,
                          feature_dim=5)
        model = AsrModel.create(cfg, MhaAll(frozen_encoder=True), seed=0)
        rng = np.random.default_rng(0)
        frames = rng.standard_normal((2, 5, 5))
        with Graph() as g:
            _, memory, trace = model.forward(frames, None, np.array([[1, 3], [1, 4]]))
            loss = (trace.logits * trace.logits).sum()
        g.backward(loss)
        enc = [v for k, v in model.weights.items() if k.startswith("enc.")]
        assert all(not v.grad.any() for v in enc)
        assert any(model.weights[k].grad.any() for k in ("ala.attn.wq", "ala.attn.wv", "ala.attn.wo"))
        assert "enc.0.attn.wq" not in model.trainable_names()


class TestStats:
    def make(self, part, zero=False):
        cfg = ModelConfig(enc_layers=part.n_layers, d_model=16, n_heads=2, d_ff=32)
        model = AsrModel.create(cfg, MhaBlockMean(part), seed=1)
        if zero:
            for p in "qk":
                model.weights[f"ala.attn.w{p}"].data[:] = 0
                model.weights[f"ala.attn.b{p}"].data[:] = 0
        rng = np.random.default_rng(0)
        return model, [rng.standard_normal((n, 16)) for n in (4, 7, 3)]

    def test_dataset_mean_is_distribution(self):
        model, xs = self.make(BlockPartition(((1, 2), (3, 3), (4, 5))))
        stats = block_attention_stats(xs, model)
        assert abs(stats["dataset_mean"].sum() - 1) <= 1e-6
        assert [p.shape for p in stats["per_frame"]] == [(4, 3), (7, 3), (3, 3)]

    def test_single_block(self):
        model, xs = self.make(BlockPartition.single(3))
        np.testing.assert_allclose(block_attention_stats(xs, model)["dataset_mean"], [1.0])

    def test_uniform_when_scores_vanish(self):
        model, xs = self.make(BlockPartition(((1, 1), (2, 3), (4, 4))), zero=True)
        np.testing.assert_allclose(block_attention_stats(xs, model)["dataset_mean"], 1 / 3, atol=1e-6)

    def test_rejects_other_strategies(self):
        cfg = ModelConfig(enc_layers=2, d_model=16, n_heads=2, d_ff=32)
        with pytest.raises(ValueError):
            block_attention_stats([np.zeros((2, 16))], AsrModel.create(cfg, WeightedSum()))


@pytest.mark.parametrize("strategy", TestFuse.STRATEGIES + [MhaAll(frozen_encoder=True), None])
def test_strategy_round_trip(strategy):
    assert strategy_from_dict(strategy_to_dict(strategy)) == strategy
