import math

import numpy as np
import pytest

from alakd import distill as kd
from alakd.ala import AsrModel, BlockPartition, MhaBlockMean
from alakd.data import CorpusSpec, build_splits, collate
from alakd.distill import (
    ALL_LOSSES, CE, DEC_COS, DEC_MSE_CA, ENC_COS, LOSS_ABLATIONS, KdConfig, Schedule,
    TrainingDiverged, attention_mse, ce_loss, cos_all_loss, dec_cos_loss, enc_cos_loss,
    kl_logits_loss, lr_schedule, run_model, total_kd_loss, train_ce, train_stage1,
    train_stage2_distill, weighted_total,
)
from alakd.model import ModelConfig, copy_weights
from alakd.tensor import Tensor, check_gradients

TINY = ModelConfig(enc_layers=2, dec_layers=1, d_model=8, n_heads=2, d_ff=16, vocab_size=7,
                   max_src_len=12, max_tgt_len=6, feature_dim=5)
TINY_SPEC = CorpusSpec(vocab_size=7, min_len=1, max_len=2, feature_dim=5, frames_per_token=2,
                       num_train=6, num_test=1, num_test_noise_only=0, seed=3)


def cos(u, v):
    return u @ v / (np.linalg.norm(u) * np.linalg.norm(v))


class TestCosineLosses:
    def test_enc_cos_oracle(self):
        rng = np.random.default_rng(0)
        t, s = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        oracle = sum(1 - cos(t[i], s[i]) for i in range(3))
        assert abs(enc_cos_loss(t, s).item() - oracle) <= 1e-12

    def test_dec_cos_oracle_batched(self):
        rng = np.random.default_rng(1)
        t, s = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 4))
        per_utt = [sum(1 - cos(t[b, i], s[b, i]) for i in range(5)) for b in range(2)]
        assert abs(dec_cos_loss(t, s).item() - np.mean(per_utt)) <= 1e-12

    def test_identical_is_zero(self):
        x = np.random.default_rng(2).standard_normal((4, 6))
        assert abs(enc_cos_loss(x, x).item()) <= 1e-12

    def test_positive_rescaling_invariance(self):
        rng = np.random.default_rng(3)
        t, s = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        a = rng.uniform(0.1, 10, size=(5, 1))
        assert abs(enc_cos_loss(a * t, s).item() - enc_cos_loss(t, s).item()) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            enc_cos_loss(np.ones((3, 4)), np.ones((3, 5)))

    def test_cos_all_oracle(self):
        rng = np.random.default_rng(4)
        ts = [rng.standard_normal((3, 4)) for _ in range(3)]
        ss = [rng.standard_normal((3, 4)) for _ in range(3)]
        oracle = sum(1 - cos(t[i], s[i]) for t, s in zip(ts, ss) for i in range(3))
        assert abs(cos_all_loss(ts, ss).item() - oracle) <= 1e-12

    def test_cos_all_layer_count(self):
        with pytest.raises(ValueError):
            cos_all_loss([np.ones((2, 2))], [])


class TestAttentionMse:
    def test_flat_sum_oracle(self):
        rng = np.random.default_rng(5)
        t = [rng.random((2, 3, 4)) for _ in range(3)]
        s = [rng.random((2, 3, 4)) for _ in range(3)]
        flat = sum(((a - b) ** 2).sum() for a, b in zip(t, s))
        assert abs(attention_mse(t, s).item() - flat / (3 * 2 * 3 * 4)) <= 1e-12

    def test_identical_maps(self):
        m = [np.full((2, 2, 3), 1 / 3)] * 2
        assert attention_mse(m, m).item() == 0.0

    def test_masked_batched(self):
        rng = np.random.default_rng(6)
        t = [rng.random((2, 2, 3, 4))]
        s = [rng.random((2, 2, 3, 4))]
        mask = np.ones((2, 3, 4), bool)
        mask[1, :, 2:] = False
        per = []
        for b in range(2):
            d = (t[0][b] - s[0][b]) ** 2
            sel = d[:, mask[b]]
            per.append(sel.sum() / sel.size)
        assert abs(attention_mse(t, s, mask).item() - np.mean(per)) <= 1e-12


class TestCeAndKl:
    def test_ce_log_sum_exp_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((2, 3, 5))
        targets = np.array([[3, 4, 2], [1, 2, 0]])
        per = []
        for b in range(2):
            total = 0.0
            for t in range(3):
                if targets[b, t] == 0:
                    continue
                row = logits[b, t]
                total += math.log(sum(math.exp(v) for v in row)) - row[targets[b, t]]
            per.append(total)
        assert abs(ce_loss(logits, targets).item() - np.mean(per)) <= 1e-10

    def test_ce_rejects_bad_targets(self):
        with pytest.raises(ValueError):
            ce_loss(np.zeros((1, 2, 3)), np.array([[1, 5]]))

    def test_kl_two_class(self):
        p = np.log([[0.9, 0.1]])
        got = kl_logits_loss(p, np.zeros((1, 2))).item()
        assert abs(got - (0.9 * math.log(1.8) + 0.1 * math.log(0.2))) <= 1e-12

    def test_kl_identical_is_zero(self):
        x = np.random.default_rng(8).standard_normal((3, 6))
        assert abs(kl_logits_loss(x, x).item()) <= 1e-12


class TestTotal:
    def test_reference_combination(self):
        comps = {ENC_COS: 1.0, DEC_COS: 2.0, DEC_MSE_CA: 3.0, CE: 4.0}
        assert weighted_total(comps, KdConfig((0.8, 1.0, 1.0, 1.0))) == 9.8

    def test_dot_product_and_linearity(self):
        rng = np.random.default_rng(9)
        names = (ENC_COS, DEC_COS, DEC_MSE_CA, CE)
        for _ in range(100):
            lam = rng.uniform(0, 2, 4)
            c = rng.uniform(0, 5, 4)
            cfg = KdConfig(tuple(lam))
            total = weighted_total(dict(zip(names, c)), cfg)
            assert abs(total - lam @ c) <= 1e-12
            k = int(rng.integers(4))
            bumped = c.copy()
            bumped[k] *= 2
            delta = weighted_total(dict(zip(names, bumped)), cfg) - total
            assert abs(delta - lam[k] * c[k]) <= 1e-12

    def test_disabled_terms_ignored(self):
        cfg = KdConfig(enabled={CE})
        assert weighted_total({ENC_COS: 5.0, CE: 1.5}, cfg) == 1.5

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KdConfig((1, 1, 1))
        with pytest.raises(ValueError):
            KdConfig(enabled={ENC_COS})
        with pytest.raises(ValueError):
            KdConfig((1, -1, 1, 1))

    def test_round_trip(self):
        cfg = KdConfig((0.5, 1.0, 2.0, 1.0), {CE, ENC_COS}, 2.0)
        assert KdConfig.from_dict(cfg.to_dict()) == cfg


class TestRegistry:
    def test_nine_rows(self):
        assert len(LOSS_ABLATIONS) == 9
        assert LOSS_ABLATIONS[-1].name == "+CosFin+MSE(decCA)+ALA" and LOSS_ABLATIONS[-1].student_ala
        assert LOSS_ABLATIONS[0].enabled == {CE}

    def test_lookup(self):
        assert kd.loss_row("+KLFin").enabled == {CE, kd.KL_FIN}
        with pytest.raises(KeyError):
            kd.loss_row("+OTFin")

    def test_every_loss_used(self):
        used = set().union(*(r.enabled for r in LOSS_ABLATIONS))
        assert used == set(ALL_LOSSES)


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, "cosine", 10, 100, 1e-3) == 0
        assert lr_schedule(10, "cosine", 10, 100, 1e-3) == 1e-3
        assert abs(lr_schedule(100, "cosine", 10, 100, 1e-3)) <= 1e-18
        assert lr_schedule(100, "linear", 10, 100, 1e-3) == 0

    def test_cosine_midpoint(self):
        assert abs(lr_schedule(55, "cosine", 10, 100, 2.0) - 1.0) <= 1e-12

    def test_bad_warmup(self):
        with pytest.raises(ValueError):
            lr_schedule(0, "cosine", 100, 100, 1.0)

    def test_two_groups(self):
        s = Schedule(steps=10, warmup=2, peak_base=1.0, peak_ala=1.8)
        assert s.rate(2, "base") == 1.0 and s.rate(2, "ala") == 1.8


@pytest.fixture(scope="module")
def tiny_data():
    return build_splits(TINY_SPEC)


def tiny_pair(seed=0):
    teacher = AsrModel.create(TINY, seed=seed)
    student = AsrModel(TINY, copy_weights(teacher.weights), MhaBlockMean(BlockPartition(((1, 1), (2, 2)))))
    return teacher, student


class TestDistillation:
    def test_self_distillation_zero(self, tiny_data):
        teacher, _ = tiny_pair()
        batch = collate(tiny_data["train"][:4])
        batch.frames = batch.clean
        out = run_model(teacher, batch)
        cfg = KdConfig(enabled=ALL_LOSSES)
        vals = total_kd_loss(out, out, batch, cfg).values()
        for name in ALL_LOSSES:
            if name != CE:
                assert abs(vals[name]) <= 1e-12, name

    def test_kd_gradient(self, tiny_data):
        teacher, student = tiny_pair(1)
        batch = collate(tiny_data["train"][:3])
        t_out = run_model(teacher, batch, use_clean=True)
        cfg = KdConfig(enabled=ALL_LOSSES)
        names = ["enc.0.attn.wq", "enc.1.ff.w1", "ala.attn.wk", "ala.attn.wo", "dec.0.cross.wv", "dec.emb"]

        def loss(*params):
            ws = dict(student.weights) | dict(zip(names, params))
            s_out = run_model(student, batch, weights=ws)
            return total_kd_loss(t_out, s_out, batch, cfg).total

        rep = check_gradients(loss, [student.weights[n].data for n in names], max_elements=8)
        assert rep.passed, rep

    def test_teacher_untouched(self, tiny_data):
        teacher, student = tiny_pair(2)
        before = {k: v.data.copy() for k, v in teacher.weights.items()}
        train_stage2_distill(tiny_data["train"], teacher, student, KdConfig(enabled=ALL_LOSSES),
                             Schedule(steps=3, warmup=1, batch_size=3))
        for k, v in teacher.weights.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_ce_only_matches_plain_fine_tuning(self, tiny_data):
        sched = Schedule(steps=5, warmup=1, kind="linear", batch_size=3)
        teacher, a = tiny_pair(3)
        b = AsrModel(TINY, copy_weights(a.weights), a.fusion)
        train_stage2_distill(tiny_data["train"], teacher, a, KdConfig((0, 0, 0, 1)), sched, seed=4)
        train_ce(tiny_data["train"], b, sched, seed=4)
        for k in a.weights:
            np.testing.assert_array_equal(a.weights[k].data, b.weights[k].data)

    def test_mismatched_student_rejected(self, tiny_data):
        teacher = AsrModel.create(TINY)
        other = AsrModel.create(ModelConfig(enc_layers=3, dec_layers=1, d_model=8, n_heads=2, d_ff=16,
                                             vocab_size=7, feature_dim=5))
        with pytest.raises(ValueError):
            train_stage2_distill(tiny_data["train"], teacher, other, KdConfig(), Schedule(steps=2, warmup=0))

    def test_history_rows(self, tiny_data):
        teacher, student = tiny_pair(4)
        res = train_stage2_distill(tiny_data["train"], teacher, student, KdConfig(),
                                   Schedule(steps=4, warmup=1, batch_size=2))
        assert [r["step"] for r in res.history] == [0, 1, 2, 3]
        assert {"total", CE, ENC_COS, "lr", "lr_ala", "wall_time"} <= set(res.history[0])
        assert res.history[0]["lr"] == 0.0


class TestStage1:
    def test_requires_fusion(self, tiny_data):
        with pytest.raises(ValueError):
            train_stage1(tiny_data["train"], AsrModel.create(TINY), Schedule(steps=2, warmup=0))

    def test_deterministic(self, tiny_data):
        runs = []
        for _ in range(2):
            _, m = tiny_pair(5)
            train_stage1(tiny_data["train"], m, Schedule(steps=4, warmup=1, batch_size=3), seed=1)
            runs.append(m)
        for k in runs[0].weights:
            np.testing.assert_array_equal(runs[0].weights[k].data, runs[1].weights[k].data)

    def test_divergence_aborts(self, tiny_data):
        _, m = tiny_pair(6)
        m.weights["enc.in.w"].data[:] = np.nan
        with pytest.raises(TrainingDiverged, match="step 0"):
            train_stage1(tiny_data["train"], m, Schedule(steps=2, warmup=0))

    def test_overfit_four_samples(self):
        spec = CorpusSpec(num_train=4, num_test=1, num_test_noise_only=0, seed=5)
        utts = build_splits(spec)["train"]
        model = AsrModel.create(ModelConfig(), MhaBlockMean(BlockPartition(((1, 3), (4, 5), (6, 6)))), seed=0)
        res = train_stage1(utts, model, Schedule(steps=300, warmup=30, peak_base=2e-3, peak_ala=3.6e-3,
                                                 batch_size=4))
        assert res.history[-1][CE] < 0.05
