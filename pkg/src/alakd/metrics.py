"""Word error rate with an edit breakdown, and per-SNR evaluation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import TEST_SNRS, Utterance, collate, snr_label


@dataclass(frozen=True)
class EditBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / max(self.ref_len, 1)


def wer(reference: Sequence, hypothesis: Sequence) -> EditBreakdown:
    """Unit-cost Levenshtein alignment. The backtrace prefers substitution
    (or match), then deletion, then insertion."""
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, prev, r = d[i], d[i - 1], ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditBreakdown(s, ins, dels, n)


def insertion_rate(hypotheses: Sequence[Sequence], noise_only: Sequence[bool] | None = None) -> float:
    """Mean hypothesis length over noise-only inputs (0 = no hallucination)."""
    if noise_only is not None and not all(noise_only):
        raise ValueError("insertion_rate is defined on noise-only utterances only")
    if not hypotheses:
        return 0.0
    return float(np.mean([len(h) for h in hypotheses]))


@dataclass
class ConditionResult:
    condition: str
    wer: float
    insertion_rate: float
    count: int


@dataclass
class SnrReport:
    conditions: list[ConditionResult]
    noise_only_insertion_rate: float | None = None
    config_hash: str = ""

    @property
    def average_wer(self) -> float:
        return float(np.mean([c.wer for c in self.conditions]))

    @property
    def average_insertion_rate(self) -> float:
        return float(np.mean([c.insertion_rate for c in self.conditions]))

    def wer_at(self, condition: str) -> float:
        for c in self.conditions:
            if c.condition == condition:
                return c.wer
        raise KeyError(condition)

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "conditions": [asdict(c) for c in self.conditions],
            "average": {"wer": self.average_wer, "insertion_rate": self.average_insertion_rate},
            "noise_only_insertion_rate": self.noise_only_insertion_rate,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        cols = [f"SNR {c.condition}" if c.condition != "clean" else "Clean" for c in self.conditions]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *cols, "Average"])
        w.writerow(["wer", *[repr(c.wer) for c in self.conditions], repr(self.average_wer)])
        w.writerow(["insertion_rate", *[repr(c.insertion_rate) for c in self.conditions],
                    repr(self.average_insertion_rate)])
        return buf.getvalue()


def transcribe_all(model, utts: Sequence[Utterance], batch_size: int = 64) -> list[list[int]]:
    """Greedy transcripts in input order."""
    out: list[list[int]] = []
    for s in range(0, len(utts), batch_size):
        batch = collate(utts[s:s + batch_size])
        out.extend(model.transcribe(batch.frames, batch.src_mask))
    return out


def score_condition(name: str, refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> ConditionResult:
    edits = [wer(r, h) for r, h in zip(refs, hyps)]
    return ConditionResult(
        name,
        float(np.mean([e.wer for e in edits])),
        float(np.mean([e.insertions for e in edits])),
        len(edits),
    )


def evaluate_model(model, test_sets: Mapping[float | None, Sequence[Utterance]],
                   noise_only: Sequence[Utterance] = (), config_hash: str = "") -> SnrReport:
    """Per-condition mean utterance WER in the fixed -10..+10, clean order."""
    conditions = []
    for snr in TEST_SNRS:
        if snr not in test_sets:
            continue
        utts = test_sets[snr]
        hyps = transcribe_all(model, utts)
        conditions.append(score_condition(snr_label(snr), [u.tokens for u in utts], hyps))
    rate = None
    if noise_only:
        rate = insertion_rate(transcribe_all(model, noise_only), [u.is_noise_only for u in noise_only])
    return SnrReport(conditions, rate, config_hash)
