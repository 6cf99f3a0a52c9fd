"""Small pre-norm encoder-decoder transformer.

The encoder returns every layer's hidden states (each passed through the
shared output norm) and the decoder returns its per-layer hidden states and
attention maps, so that layer fusion and distillation can get at them.
Everything is batch-first: frames ``B x T x F``, tokens ``B x U``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
NEG_INF = -1e9
LN_EPS = 1e-5

Weights = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 6
    dec_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 16
    max_src_len: int = 64
    max_tgt_len: int = 16
    feature_dim: int = 16

    def __post_init__(self):
        counts = (self.enc_layers, self.dec_layers, self.d_model, self.n_heads, self.d_ff,
                  self.vocab_size, self.max_src_len, self.max_tgt_len, self.feature_dim)
        if min(counts) < 1:
            raise ValueError(f"all model sizes must be >= 1: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerStates:
    """Per-layer encoder outputs ``e_1..e_L`` plus self-attention maps."""

    states: list[Tensor]
    self_attn: list[Tensor] = field(default_factory=list)
    src_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> Tensor:
        return self.states[-1]


@dataclass
class DecoderTrace:
    logits: Tensor
    hidden: list[Tensor]
    cross_attn: list[Tensor]
    self_attn: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.hidden[-1]


# ---------------------------------------------------------------- weights


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.w{p}"] = (d, d)
        out[f"{prefix}.b{p}"] = (d,)
    return out


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ff_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, d_ff), f"{prefix}.b1": (d_ff,),
            f"{prefix}.w2": (d_ff, d), f"{prefix}.b2": (d,)}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for the base model, in canonical order."""
    d, c = config.d_model, config
    shapes: dict[str, tuple[int, ...]] = {"enc.in.w": (c.feature_dim, d), "enc.in.b": (d,)}
    for i in range(c.enc_layers):
        p = f"enc.{i}"
        shapes |= _ln_shapes(f"{p}.ln1", d) | _attn_shapes(f"{p}.attn", d)
        shapes |= _ln_shapes(f"{p}.ln2", d) | _ff_shapes(f"{p}.ff", d, c.d_ff)
    shapes |= _ln_shapes("enc.ln_post", d)
    shapes["dec.emb"] = (c.vocab_size, d)
    for i in range(c.dec_layers):
        p = f"dec.{i}"
        shapes |= _ln_shapes(f"{p}.ln1", d) | _attn_shapes(f"{p}.self", d)
        shapes |= _ln_shapes(f"{p}.ln2", d) | _attn_shapes(f"{p}.cross", d)
        shapes |= _ln_shapes(f"{p}.ln3", d) | _ff_shapes(f"{p}.ff", d, c.d_ff)
    shapes |= _ln_shapes("dec.ln_post", d)
    return shapes


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if len(shape) == 1:
        return np.ones(shape) if leaf == "g" and ".ln" in name else np.zeros(shape)
    if name == "dec.emb":
        return _glorot(rng, shape[1], shape[0], shape)
    return _glorot(rng, shape[0], shape[1])


def init_weights(config: ModelConfig, seed: int = 0) -> Weights:
    rng = np.random.default_rng(seed)
    return {
        name: Tensor(_init_array(name, shape, rng), requires_grad=True, name=name)
        for name, shape in parameter_shapes(config).items()
    }


def copy_weights(weights: Mapping[str, Tensor], trainable: bool = True) -> Weights:
    return {k: Tensor(v.data.copy(), requires_grad=trainable, name=k) for k, v in weights.items()}


# ---------------------------------------------------------------- building blocks


def sinusoidal_pos_enc(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError(f"sinusoidal positions need an even width, got {d_model}")
    if length < 1:
        raise ValueError("length must be >= 1")
    pos = np.arange(length)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y + b if b is not None else y


def norm(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    return tn.layer_norm(x, weights[f"{prefix}.g"], weights[f"{prefix}.b"], LN_EPS)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = x.transpose(axes)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def multi_head_attention(
    query: Tensor,
    memory: Tensor,
    weights: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, probs ``... x H x Tq x Tk``).

    ``mask`` is additive and broadcast against the score tensor.
    """
    q = _split_heads(linear(query, weights[f"{prefix}.wq"], weights[f"{prefix}.bq"]), n_heads)
    k = _split_heads(linear(memory, weights[f"{prefix}.wk"], weights[f"{prefix}.bk"]), n_heads)
    v = _split_heads(linear(memory, weights[f"{prefix}.wv"], weights[f"{prefix}.bv"]), n_heads)
    scores = (q @ tn.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    probs = tn.softmax(scores, axis=-1)
    ctx = _merge_heads(probs @ v)
    return linear(ctx, weights[f"{prefix}.wo"], weights[f"{prefix}.bo"]), probs


def feed_forward(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = tn.gelu(linear(x, weights[f"{prefix}.w1"], weights[f"{prefix}.b1"]))
    return linear(h, weights[f"{prefix}.w2"], weights[f"{prefix}.b2"])


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """``B x T`` validity -> additive ``B x 1 x 1 x T`` mask."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


# ---------------------------------------------------------------- encoder / decoder


def encode(
    frames: np.ndarray,
    config: ModelConfig,
    weights: Mapping[str, Tensor],
    src_mask: np.ndarray | None = None,
    frozen: bool = False,
) -> LayerStates:
    """Run the encoder on ``B x T x F`` frames and return all L layer states.

    ``frozen`` runs on detached weights so no gradient reaches the encoder.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[-1] != config.feature_dim:
        raise ValueError(f"expected B x T x {config.feature_dim} frames, got {frames.shape}")
    b, t, _ = frames.shape
    if t > config.max_src_len:
        raise ValueError(f"source length {t} exceeds max_src_len={config.max_src_len}")
    if frozen:
        weights = {k: v.detach() for k, v in weights.items() if k.startswith("enc.")}
    mask = None if src_mask is None else key_padding_mask(src_mask)
    x = linear(Tensor(frames), weights["enc.in.w"], weights["enc.in.b"])
    x = x + sinusoidal_pos_enc(t, config.d_model)
    states, maps = [], []
    for i in range(config.enc_layers):
        p = f"enc.{i}"
        h = norm(x, weights, f"{p}.ln1")
        a, probs = multi_head_attention(h, h, weights, f"{p}.attn", config.n_heads, mask)
        x = x + a
        x = x + feed_forward(norm(x, weights, f"{p}.ln2"), weights, f"{p}.ff")
        states.append(norm(x, weights, "enc.ln_post"))
        maps.append(probs)
    return LayerStates(states, maps, None if src_mask is None else np.asarray(src_mask, bool))


def decode(
    tgt_tokens: np.ndarray,
    memory: Tensor,
    config: ModelConfig,
    weights: Mapping[str, Tensor],
    src_mask: np.ndarray | None = None,
) -> DecoderTrace:
    """Teacher-forced decoder pass over ``B x U`` input tokens."""
    tokens = np.asarray(tgt_tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"expected B x U tokens, got shape {tokens.shape}")
    if memory.shape[-1] != config.d_model:
        raise ValueError(f"memory width {memory.shape[-1]} != d_model {config.d_model}")
    if memory.shape[0] != tokens.shape[0]:
        raise ValueError(f"batch mismatch: memory {memory.shape[0]} vs tokens {tokens.shape[0]}")
    u = tokens.shape[1]
    if u > config.max_tgt_len:
        raise ValueError(f"target length {u} exceeds max_tgt_len={config.max_tgt_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")
    emb = weights["dec.emb"]
    x = emb[tokens] + sinusoidal_pos_enc(u, config.d_model)
    self_mask = causal_mask(u)
    cross_mask = None if src_mask is None else key_padding_mask(src_mask)
    hidden, cross, selfs = [], [], []
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        h = norm(x, weights, f"{p}.ln1")
        a, sp = multi_head_attention(h, h, weights, f"{p}.self", config.n_heads, self_mask)
        x = x + a
        a, cp = multi_head_attention(
            norm(x, weights, f"{p}.ln2"), memory, weights, f"{p}.cross", config.n_heads, cross_mask
        )
        x = x + a
        x = x + feed_forward(norm(x, weights, f"{p}.ln3"), weights, f"{p}.ff")
        hidden.append(norm(x, weights, "dec.ln_post"))
        cross.append(cp)
        selfs.append(sp)
    logits = hidden[-1] @ tn.swap_last(emb)
    return DecoderTrace(logits, hidden, cross, selfs)


def greedy_decode(
    frames: np.ndarray,
    config: ModelConfig,
    weights: Mapping[str, Tensor],
    max_steps: int,
    src_mask: np.ndarray | None = None,
    fuse=None,
) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_steps`` emitted tokens.

    ``fuse`` maps LayerStates to the decoder memory (defaults to the final
    layer). Returns one token list per batch row, without BOS/EOS.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    states = encode(frames, config, weights, src_mask)
    memory = fuse(states) if fuse is not None else states.final
    b = memory.shape[0]
    seq = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    steps = min(max_steps, config.max_tgt_len)
    for _ in range(steps):
        logits = decode(seq, memory, config, weights, src_mask).logits.data[:, -1]
        nxt = logits.argmax(axis=-1)
        for r in range(b):
            if done[r]:
                continue
            if nxt[r] == EOS:
                done[r] = True
            else:
                out[r].append(int(nxt[r]))
        if done.all():
            break
        seq = np.concatenate([seq, np.where(done, PAD, nxt)[:, None]], axis=1)
    return out


# ---------------------------------------------------------------- parameter counts


def ala_parameter_shapes(d_model: int) -> dict[str, tuple[int, ...]]:
    """Trainable tensors added by the block-attention fusion head."""
    return _attn_shapes("ala.attn", d_model) | _ln_shapes("ala.ln", d_model)


def count_parameters(config: ModelConfig, with_ala: bool) -> dict[str, float]:
    base = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    extra = sum(int(np.prod(s)) for s in ala_parameter_shapes(config.d_model).values()) if with_ala else 0
    return {"base": base, "ala_extra": extra, "ratio": extra / base}
