"""
Distilling a clean teacher into a noisy student
===============================================

The teacher sees clean frames, the student the noisy version of the same
utterance. Final-layer cosine terms plus cross-attention MSE are added to
the student's cross-entropy.
"""

from alakd import experiment as ex
from alakd.distill import KdConfig, loss_row
from alakd.metrics import evaluate_model

cfg = ex.ExperimentConfig.from_dict({
    "data": {"num_train": 300, "num_test": 40, "num_test_noise_only": 10},
    "schedules": {"teacher": {"steps": 250}, "distill": {"steps": 120, "warmup": 6}},
})
corpus = ex.corpus_in_memory(cfg)
teacher = ex.train_teacher(cfg, corpus).model

for name in ("CE (no KD)", "+CosFin+MSE(decCA)+ALA"):
    row = loss_row(name)
    res = ex.train_distilled(cfg, teacher, corpus, row.kd_config(cfg.kd), row.student_ala)
    last = res.history[-1]
    rep = evaluate_model(res.model, {-10.0: corpus.test[-10.0], None: corpus.test[None]}, corpus.noise_only)
    print(f"{name:28s} final total loss {last['total']:.3f}  WER@-10 {rep.wer_at('-10'):.1f}  "
          f"clean {rep.wer_at('clean'):.1f}  noise-only insertions {rep.noise_only_insertion_rate:.2f}")

# the weighted combination on its own
print(KdConfig().lambdas)
