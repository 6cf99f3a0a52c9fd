"""Teacher-student distillation losses and the two training stages.

All sequence losses sum over timesteps within an utterance; batched inputs
are then averaged over the batch, with an optional per-utterance weight so
that noise-only samples can opt out of the distillation terms.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .ala import AsrModel
from .data import Batch, Utterance, collate
from .model import PAD, DecoderTrace, LayerStates
from .tensor import Graph, Tensor

ENC_COS = "enc_cos"
DEC_COS = "dec_cos"
DEC_MSE_CA = "dec_mse_ca"
CE = "ce"
KL_LOGITS = "kl_logits"
COS_ALL = "cos_all"
KL_FIN = "kl_fin"
DEC_MSE_SA = "dec_mse_sa"
ENC_MSE_ATTN = "enc_mse_attn"

WEIGHTED = (ENC_COS, DEC_COS, DEC_MSE_CA, CE)
EXTRAS = (KL_LOGITS, COS_ALL, KL_FIN, DEC_MSE_SA, ENC_MSE_ATTN)
ALL_LOSSES = WEIGHTED + EXTRAS


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class KdConfig:
    lambdas: tuple[float, float, float, float] = (0.8, 1.0, 1.0, 1.0)
    enabled: frozenset[str] = frozenset({ENC_COS, DEC_COS, DEC_MSE_CA, CE})
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        if len(self.lambdas) != 4 or any(not math.isfinite(x) or x < 0 for x in self.lambdas):
            raise ValueError(f"lambdas must be four finite non-negative numbers: {self.lambdas}")
        if CE not in self.enabled:
            raise ValueError("cross-entropy must always be enabled")
        unknown = self.enabled - set(ALL_LOSSES)
        if unknown:
            raise ValueError(f"unknown losses {sorted(unknown)}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def weight(self, name: str) -> float:
        return self.lambdas[WEIGHTED.index(name)] if name in WEIGHTED else 1.0

    @property
    def needs_teacher(self) -> bool:
        return any(n != CE and self.weight(n) != 0 for n in self.enabled)

    def to_dict(self) -> dict:
        return {"lambdas": list(self.lambdas), "enabled": sorted(self.enabled),
                "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: Mapping) -> "KdConfig":
        return cls(tuple(d.get("lambdas", (0.8, 1.0, 1.0, 1.0))),
                   frozenset(d.get("enabled", (ENC_COS, DEC_COS, DEC_MSE_CA, CE))),
                   float(d.get("temperature", 1.0)))


@dataclass(frozen=True)
class LossRow:
    name: str
    enabled: frozenset[str]
    student_ala: bool = False

    def kd_config(self, base: KdConfig | None = None) -> KdConfig:
        """``base`` with this row's loss set (lambdas and options are kept)."""
        return replace(base or KdConfig(), enabled=self.enabled)


_COS_FIN = {CE, ENC_COS, DEC_COS}

LOSS_ABLATIONS: tuple[LossRow, ...] = (
    LossRow("CE (no KD)", frozenset({CE})),
    LossRow("+KL(logits)", frozenset({CE, KL_LOGITS})),
    LossRow("+CosAll", frozenset({CE, COS_ALL})),
    LossRow("+CosFin", frozenset(_COS_FIN)),
    LossRow("+KLFin", frozenset({CE, KL_FIN})),
    LossRow("+CosFin+MSE(decCA)", frozenset(_COS_FIN | {DEC_MSE_CA})),
    LossRow("+CosFin+MSE(decCA)+MSE(decSA)", frozenset(_COS_FIN | {DEC_MSE_CA, DEC_MSE_SA})),
    LossRow("+CosFin+MSE(decCA)+MSE(enc)", frozenset(_COS_FIN | {DEC_MSE_CA, ENC_MSE_ATTN})),
    LossRow("+CosFin+MSE(decCA)+ALA", frozenset(_COS_FIN | {DEC_MSE_CA}), student_ala=True),
)
# defined only by external work; not implemented
EXCLUDED_ABLATIONS = ("+OTFin", "+IRLEFin")


def loss_row(name: str) -> LossRow:
    for row in LOSS_ABLATIONS:
        if row.name == name:
            return row
    raise KeyError(f"unknown loss configuration {name!r}")


# ---------------------------------------------------------------- reductions


def _reduce(per_step: Tensor, mask: np.ndarray | None, weights: np.ndarray | None) -> Tensor:
    """Sum over the last (time) axis, then average over any leading batch axes."""
    if mask is not None:
        per_step = per_step * np.asarray(mask, float)
    per_utt = per_step.sum(axis=-1)
    if per_utt.ndim == 0:
        return per_utt
    if weights is not None:
        per_utt = per_utt * np.asarray(weights, float)
    return per_utt.mean()


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: teacher {a.shape} vs student {b.shape}")


# ---------------------------------------------------------------- losses


def cosine_alignment(teacher: Tensor, student: Tensor, mask=None, weights=None) -> Tensor:
    """``sum_t (1 - cos(teacher_t, student_t))``; teacher is treated as constant."""
    teacher, student = tn.as_tensor(teacher), tn.as_tensor(student)
    _check_same(teacher, student, "cosine loss shape mismatch")
    cos = tn.cosine_similarity(teacher.detach(), student)
    return _reduce(1.0 - cos, mask, weights)


def enc_cos_loss(teacher_states, student_states, mask=None, weights=None) -> Tensor:
    return cosine_alignment(teacher_states, student_states, mask, weights)


def dec_cos_loss(teacher_trace, student_trace, mask=None, weights=None) -> Tensor:
    t = teacher_trace.final if isinstance(teacher_trace, DecoderTrace) else teacher_trace
    s = student_trace.final if isinstance(student_trace, DecoderTrace) else student_trace
    return cosine_alignment(t, s, mask, weights)


def attention_mse(teacher_maps: Sequence, student_maps: Sequence,
                  entry_mask: np.ndarray | None = None, weights=None) -> Tensor:
    """Mean squared difference over layers, heads and map entries.

    Maps are ``B x H x Tq x Tk`` (or unbatched ``H x Tq x Tk``); ``entry_mask``
    is ``B x Tq x Tk`` validity and restricts the mean to real positions.
    """
    if len(teacher_maps) != len(student_maps) or not teacher_maps:
        raise ValueError(f"layer count mismatch: {len(teacher_maps)} vs {len(student_maps)}")
    total = None
    for t, s in zip(teacher_maps, student_maps):
        t, s = tn.as_tensor(t), tn.as_tensor(s)
        _check_same(t, s, "attention map mismatch")
        diff = s - t.detach()
        sq = diff * diff
        total = sq if total is None else total + sq
    n_layers, shape = len(teacher_maps), total.shape
    if len(shape) == 3:
        return total.sum() * (1.0 / (n_layers * total.data.size))
    b, h = shape[0], shape[1]
    if entry_mask is None:
        entry_mask = np.ones((b, shape[2], shape[3]))
    m = np.asarray(entry_mask, float)[:, None]  # B x 1 x Tq x Tk
    counts = n_layers * h * m.reshape(b, -1).sum(axis=1)
    per_utt = (total * m).reshape(b, -1).sum(axis=-1) * (1.0 / counts)
    if weights is not None:
        per_utt = per_utt * np.asarray(weights, float)
    return per_utt.mean()


def dec_attn_mse_loss(teacher_out, student_out, variant: str = "cross",
                      entry_mask=None, weights=None) -> Tensor:
    """Attention-map MSE for ``variant`` in {cross, self, encoder}."""
    pick = {
        "cross": lambda o: o.trace.cross_attn,
        "self": lambda o: o.trace.self_attn,
        "encoder": lambda o: o.states.self_attn,
    }
    if variant not in pick:
        raise ValueError(f"unknown attention family {variant!r}")
    return attention_mse(pick[variant](teacher_out), pick[variant](student_out), entry_mask, weights)


def ce_loss(logits: Tensor, target_tokens: np.ndarray, pad_token: int = PAD) -> Tensor:
    """Summed negative log-likelihood of the targets; pad targets are skipped."""
    logits = tn.as_tensor(logits)
    targets = np.asarray(target_tokens, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.max() >= v or targets.min() < 0):
        raise ValueError(f"target index outside vocabulary of size {v}")
    logp = tn.log_softmax(logits, axis=-1)
    idx = tuple(np.indices(targets.shape)) + (targets,)
    picked = logp[idx]
    return _reduce(-picked, targets != pad_token, None)


def kl_divergence(teacher_logits, student_logits, temperature: float = 1.0,
                  mask=None, weights=None) -> Tensor:
    """``sum_t KL(softmax(teacher_t / tau) || softmax(student_t / tau))``."""
    teacher_logits, student_logits = tn.as_tensor(teacher_logits), tn.as_tensor(student_logits)
    _check_same(teacher_logits, student_logits, "KL shape mismatch")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    tz = teacher_logits.data / temperature
    tz = tz - tz.max(axis=-1, keepdims=True)
    log_p = tz - np.log(np.exp(tz).sum(axis=-1, keepdims=True))
    log_q = tn.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    p = np.exp(log_p)
    per_step = ((log_q * -1.0 + log_p) * p).sum(axis=-1)
    return _reduce(per_step, mask, weights)


def kl_logits_loss(teacher_logits, student_logits, temperature: float = 1.0,
                   mask=None, weights=None) -> Tensor:
    return kl_divergence(teacher_logits, student_logits, temperature, mask, weights)


def cos_all_loss(teacher_all: Sequence, student_all: Sequence, masks=None, weights=None) -> Tensor:
    """Sum of per-layer cosine alignment terms over matched layer stacks.

    ``masks`` gives one time mask per layer (or None)."""
    if len(teacher_all) != len(student_all) or not teacher_all:
        raise ValueError(f"layer count mismatch: {len(teacher_all)} vs {len(student_all)}")
    masks = masks if masks is not None else [None] * len(teacher_all)
    total = None
    for t, s, m in zip(teacher_all, student_all, masks):
        term = cosine_alignment(t, s, m, weights)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- combination


def weighted_total(components: Mapping[str, object], config: KdConfig):
    """``l1*enc_cos + l2*dec_cos + l3*dec_mse + l4*ce + sum(extras)`` over enabled terms.

    Works on floats or Tensors; terms with weight 1 are added without scaling.
    """
    total = None
    for name in ALL_LOSSES:
        if name not in config.enabled or name not in components:
            continue
        w = config.weight(name)
        if w == 0:
            continue
        term = components[name] if w == 1.0 else components[name] * w
        total = term if total is None else total + term
    return 0.0 if total is None else total


@dataclass
class KdLossBundle:
    enc_cos: Tensor | float
    dec_cos: Tensor | float
    dec_mse: Tensor | float
    ce: Tensor | float
    extras: dict[str, Tensor | float]
    total: Tensor | float

    def values(self) -> dict[str, float]:
        f = lambda x: float(x.data) if isinstance(x, Tensor) else float(x)
        out = {ENC_COS: f(self.enc_cos), DEC_COS: f(self.dec_cos), DEC_MSE_CA: f(self.dec_mse),
               CE: f(self.ce)}
        out |= {k: f(v) for k, v in self.extras.items()}
        out["total"] = f(self.total)
        return out


@dataclass
class Outputs:
    states: LayerStates
    memory: Tensor
    trace: DecoderTrace


def run_model(model: AsrModel, batch: Batch, use_clean: bool = False,
              weights: Mapping[str, Tensor] | None = None) -> Outputs:
    """Teacher-forced forward pass; optional ``weights`` override (for a frozen copy)."""
    m = model if weights is None else AsrModel(model.config, dict(weights), model.fusion, model.ala_heads)
    frames = batch.clean if use_clean else batch.frames
    states, memory, trace = m.forward(frames, batch.src_mask, batch.dec_in)
    return Outputs(states, memory, trace)


def total_kd_loss(teacher: Outputs | None, student: Outputs, batch: Batch,
                  config: KdConfig) -> KdLossBundle:
    """Compute every enabled term for one batch and their weighted total.

    Distillation terms are skipped for noise-only utterances (no clean input).
    """
    kd_w = (~batch.noise_only).astype(float)
    comps: dict[str, Tensor | float] = {CE: ce_loss(student.trace.logits, batch.targets)}
    active = {n for n in config.enabled if n != CE and config.weight(n) != 0}
    if active and teacher is None:
        raise ValueError("distillation terms enabled but no teacher outputs given")
    src, tgt = batch.src_mask, batch.tgt_mask
    if ENC_COS in active:
        comps[ENC_COS] = enc_cos_loss(teacher.memory, student.memory, src, kd_w)
    if DEC_COS in active:
        comps[DEC_COS] = dec_cos_loss(teacher.trace, student.trace, tgt, kd_w)
    if DEC_MSE_CA in active:
        comps[DEC_MSE_CA] = dec_attn_mse_loss(teacher, student, "cross",
                                              tgt[:, :, None] & src[:, None, :], kd_w)
    if DEC_MSE_SA in active:
        causal = np.tril(np.ones((tgt.shape[1],) * 2, bool))
        comps[DEC_MSE_SA] = dec_attn_mse_loss(teacher, student, "self",
                                              tgt[:, :, None] & tgt[:, None, :] & causal, kd_w)
    if ENC_MSE_ATTN in active:
        comps[ENC_MSE_ATTN] = dec_attn_mse_loss(teacher, student, "encoder",
                                                src[:, :, None] & src[:, None, :], kd_w)
    if KL_LOGITS in active:
        comps[KL_LOGITS] = kl_logits_loss(teacher.trace.logits, student.trace.logits,
                                          config.temperature, tgt, kd_w)
    if KL_FIN in active:
        comps[KL_FIN] = (kl_divergence(teacher.memory, student.memory, 1.0, src, kd_w)
                         + kl_divergence(teacher.trace.final, student.trace.final, 1.0, tgt, kd_w))
    if COS_ALL in active:
        t_all = teacher.states.states + teacher.trace.hidden
        s_all = student.states.states + student.trace.hidden
        masks = [src] * len(teacher.states.states) + [tgt] * len(teacher.trace.hidden)
        comps[COS_ALL] = cos_all_loss(t_all, s_all, masks, kd_w)
    total = weighted_total(comps, config)
    return KdLossBundle(
        comps.get(ENC_COS, 0.0), comps.get(DEC_COS, 0.0), comps.get(DEC_MSE_CA, 0.0), comps[CE],
        {k: comps[k] for k in EXTRAS if k in comps}, total,
    )


# ---------------------------------------------------------------- optimisation


def lr_schedule(step: int, kind: str, warmup_steps: int, total_steps: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak``, then cosine or linear decay to 0."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    if kind == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * progress))
    if kind == "linear":
        return peak * (1.0 - progress)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class Schedule:
    steps: int = 2000
    warmup: int = 200
    kind: str = "cosine"
    peak_base: float = 1e-3
    peak_ala: float = 1.8e-3
    batch_size: int = 16

    def rate(self, step: int, group: str) -> float:
        peak = self.peak_ala if group == "ala" else self.peak_base
        return lr_schedule(step, self.kind, self.warmup, self.steps, peak)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Adam:
    """Adam without weight decay, one learning rate per parameter group."""

    def __init__(self, params: Mapping[str, Tensor], names: Sequence[str],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.names = list(names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self, lr_for: Callable[[str], float]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            p.data = p.data - lr_for(n) * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


def param_group(name: str) -> str:
    return "ala" if name.startswith("ala.") else "base"


def batches(utts: Sequence[Utterance], batch_size: int, seed: int) -> Iterator[list[Utterance]]:
    """Endless shuffled minibatches, reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    n = len(utts)
    bs = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for s in range(0, n - bs + 1, bs):
            yield [utts[i] for i in order[s:s + bs]]


@dataclass
class TrainResult:
    model: AsrModel
    history: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _fit(model: AsrModel, utts: Sequence[Utterance], schedule: Schedule, seed: int,
         step_loss: Callable[[Batch], tuple[Tensor, dict[str, float]]],
         use_clean: bool = False, log: Callable[[dict], None] | None = None) -> TrainResult:
    names = model.trainable_names()
    opt = Adam(model.weights, names)
    history = []
    start = time.perf_counter()
    stream = batches(utts, schedule.batch_size, seed)
    for step in range(schedule.steps):
        batch = collate(next(stream), use_clean=use_clean)
        for n in names:
            model.weights[n].zero_grad()
        with Graph() as graph:
            loss, parts = step_loss(batch)
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"non-finite loss at step {step}: {parts}")
        graph.backward(loss)
        rates = {g: schedule.rate(step, g) for g in ("base", "ala")}
        opt.step(lambda n: rates[param_group(n)])
        row = {"step": step, **parts, "lr": rates["base"], "lr_ala": rates["ala"],
               "wall_time": time.perf_counter() - start}
        history.append(row)
        if log is not None:
            log(row)
    return TrainResult(model, history)


def train_ce(utts: Sequence[Utterance], model: AsrModel, schedule: Schedule, seed: int = 0,
             use_clean: bool = False, log=None) -> TrainResult:
    """Plain cross-entropy fine-tuning (updates ``model`` in place)."""

    def step_loss(batch: Batch):
        out = run_model(model, batch, use_clean=use_clean)
        loss = ce_loss(out.trace.logits, batch.targets)
        return loss, {CE: float(loss.data)}

    return _fit(model, utts, schedule, seed, step_loss, use_clean, log)


def train_stage1(utts: Sequence[Utterance], model: AsrModel, schedule: Schedule,
                 seed: int = 0, log=None) -> TrainResult:
    """Noisy-input CE fine-tuning of base + fusion weights with two peak rates."""
    if model.fusion is None:
        raise ValueError("stage 1 needs a fusion strategy")
    return train_ce(utts, model, schedule, seed, use_clean=False, log=log)


def train_stage2_distill(utts: Sequence[Utterance], teacher: AsrModel, student: AsrModel,
                         kd_config: KdConfig, schedule: Schedule, seed: int = 0,
                         log=None) -> TrainResult:
    """Distil a frozen clean-input teacher into a noisy-input student."""
    if teacher.config.d_model != student.config.d_model or \
            teacher.config.enc_layers != student.config.enc_layers or \
            teacher.config.dec_layers != student.config.dec_layers:
        raise ValueError("teacher and student must share d_model and layer counts")
    frozen = {k: v.detach() for k, v in teacher.weights.items()}
    need_teacher = kd_config.needs_teacher

    def step_loss(batch: Batch):
        t_out = run_model(teacher, batch, use_clean=True, weights=frozen) if need_teacher else None
        s_out = run_model(student, batch)
        bundle = total_kd_loss(t_out, student=s_out, batch=batch, config=kd_config)
        return bundle.total, bundle.values()

    return _fit(student, utts, schedule, seed, step_loss, False, log)
