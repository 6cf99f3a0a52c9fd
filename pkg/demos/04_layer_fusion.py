"""
Layer similarity, blocks and the fusion head
============================================

Train a small clean teacher, look at how similar its encoder layers are,
group them into contiguous blocks, then fine-tune a copy on noisy input
with block-mean layer attention in front of the decoder.
Takes a minute or two on one core.
"""

import numpy as np

from alakd import experiment as ex
from alakd.ala import block_attention_stats
from alakd.metrics import evaluate_model

cfg = ex.ExperimentConfig.from_dict({
    "data": {"num_train": 300, "num_test": 40, "num_test_noise_only": 10},
    "schedules": {"teacher": {"steps": 250}, "ala": {"steps": 120, "warmup": 12}},
})
corpus = ex.corpus_in_memory(cfg)
teacher = ex.train_teacher(cfg, corpus).model

sim, partition = ex.derive_partition(cfg, teacher, corpus)
np.set_printoptions(precision=3, suppress=True)
print(sim)
print("blocks:", partition.to_list())

model = ex.train_fusion(cfg, teacher, corpus, "mha_mean", partition).model
stats = block_attention_stats([u.noisy for u in corpus.test[-10.0]], model)
print("mean attention per block at -10 dB:", stats["dataset_mean"])

report = evaluate_model(model, corpus.test, corpus.noise_only)
print(report.to_csv())
