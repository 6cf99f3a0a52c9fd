"""Adaptive layer attention: similarity analysis, block partitioning and fusion.

Block fusion mean-pools the encoder layers of each block, adds sinusoidal
time positions, and lets every frame's final-layer state attend over the K
block vectors of that same frame. The attention output goes through an
output projection, is added back onto the final-layer state and
layer-normalised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import tensor as tn
from .model import (
    LN_EPS,
    LayerStates,
    ModelConfig,
    Weights,
    ala_parameter_shapes,
    decode,
    encode,
    greedy_decode,
    init_weights,
    multi_head_attention,
    sinusoidal_pos_enc,
    _glorot,
)
from .tensor import Tensor


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous 1-based inclusive layer ranges covering ``1..L``."""

    blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        blocks = tuple((int(a), int(b)) for a, b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValueError("partition needs at least one block")
        expect = 1
        for a, b in blocks:
            if a != expect or b < a:
                raise ValueError(f"blocks must be ordered, contiguous and disjoint from 1: {blocks}")
            expect = b + 1

    @property
    def n_layers(self) -> int:
        return self.blocks[-1][1]

    @property
    def k(self) -> int:
        return len(self.blocks)

    def layers(self, k: int) -> list[int]:
        a, b = self.blocks[k]
        return list(range(a, b + 1))

    def representatives(self, which: str) -> tuple[int, ...]:
        """First, last or middle layer of each block (the MHA-selected variants)."""
        pick = {"first": lambda a, b: a, "last": lambda a, b: b, "middle": lambda a, b: (a + b) // 2}
        return tuple(pick[which](a, b) for a, b in self.blocks)

    def to_list(self) -> list[list[int]]:
        return [list(b) for b in self.blocks]

    @classmethod
    def single(cls, n_layers: int) -> "BlockPartition":
        return cls(((1, n_layers),))


@dataclass(frozen=True)
class WeightedSum:
    pass


@dataclass(frozen=True)
class MhaAll:
    frozen_encoder: bool = False


@dataclass(frozen=True)
class MhaSelected:
    layer_indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.layer_indices)
        object.__setattr__(self, "layer_indices", idx)
        if not idx or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"layer indices must be non-empty and strictly increasing: {idx}")


@dataclass(frozen=True)
class MhaBlockMean:
    partition: BlockPartition


FusionStrategy = Union[WeightedSum, MhaAll, MhaSelected, MhaBlockMean]


def strategy_to_dict(strategy: FusionStrategy | None) -> dict | None:
    if strategy is None:
        return None
    if isinstance(strategy, WeightedSum):
        return {"kind": "weighted_sum"}
    if isinstance(strategy, MhaAll):
        return {"kind": "mha_all", "frozen_encoder": strategy.frozen_encoder}
    if isinstance(strategy, MhaSelected):
        return {"kind": "mha_selected", "layer_indices": list(strategy.layer_indices)}
    return {"kind": "mha_mean", "partition": strategy.partition.to_list()}


def strategy_from_dict(d: Mapping | None) -> FusionStrategy | None:
    if d is None:
        return None
    kind = d["kind"]
    if kind == "weighted_sum":
        return WeightedSum()
    if kind == "mha_all":
        return MhaAll(bool(d.get("frozen_encoder", False)))
    if kind == "mha_selected":
        return MhaSelected(tuple(d["layer_indices"]))
    if kind == "mha_mean":
        return MhaBlockMean(BlockPartition(tuple(tuple(b) for b in d["partition"])))
    raise ValueError(f"unknown fusion kind {kind!r}")


def validate_strategy(strategy: FusionStrategy, n_layers: int) -> None:
    if isinstance(strategy, MhaSelected):
        bad = [i for i in strategy.layer_indices if not 1 <= i <= n_layers]
        if bad:
            raise ValueError(f"selected layers {bad} outside 1..{n_layers}")
    if isinstance(strategy, MhaBlockMean) and strategy.partition.n_layers != n_layers:
        raise ValueError(f"partition covers {strategy.partition.n_layers} layers, encoder has {n_layers}")


def init_ala_weights(config: ModelConfig, seed: int = 0) -> Weights:
    """Fusion-head parameters, prefixed ``ala.``; includes the weighted-sum logits."""
    rng = np.random.default_rng(seed)
    out: Weights = {}
    for name, shape in ala_parameter_shapes(config.d_model).items():
        if len(shape) == 2:
            arr = _glorot(rng, *shape)
        else:
            arr = np.ones(shape) if name == "ala.ln.g" else np.zeros(shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    out["ala.ws"] = Tensor(np.zeros(config.enc_layers), requires_grad=True, name="ala.ws")
    return out


# ---------------------------------------------------------------- similarity / partition


def layer_similarity_from_stacks(stacks: Sequence[np.ndarray]) -> np.ndarray:
    """Mean frame-wise cosine similarity between layers, pooled over every frame.

    ``stacks`` holds one ``L x T x d`` array per utterance (valid frames only).
    """
    if len(stacks) == 0:
        raise ValueError("similarity analysis needs at least one utterance")
    n_layers = stacks[0].shape[0]
    acc = np.zeros((n_layers, n_layers))
    frames = 0
    for s in stacks:
        nrm = np.linalg.norm(s, axis=-1, keepdims=True)
        unit = s / np.maximum(nrm, 1e-8)
        acc += np.einsum("itd,jtd->ij", unit, unit)
        frames += s.shape[1]
    sim = acc / frames
    sim = 0.5 * (sim + sim.T)
    return np.clip(sim, -1.0, 1.0)


def layer_similarity(
    analysis_set: Sequence[np.ndarray], config: ModelConfig, weights: Mapping[str, Tensor]
) -> np.ndarray:
    """L x L similarity matrix of encoder layer outputs over a list of ``T x F`` inputs."""
    if len(analysis_set) == 0:
        raise ValueError("similarity analysis needs at least one utterance")
    stacks = []
    for frames in analysis_set:
        states = encode(np.asarray(frames)[None], config, weights)
        stacks.append(np.stack([s.data[0] for s in states.states]))
    return layer_similarity_from_stacks(stacks)


def partition_layers(sim: np.ndarray, threshold: float = 0.75) -> BlockPartition:
    """Greedy contiguous grouping: layer i+1 joins the open block unless its
    mean similarity to the block's members drops below ``threshold``."""
    sim = np.asarray(sim, dtype=float)
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    blocks, start = [], 0
    for i in range(1, sim.shape[0]):
        if sim[i, start:i].mean() < threshold:
            blocks.append((start + 1, i))
            start = i
    blocks.append((start + 1, sim.shape[0]))
    return BlockPartition(tuple(blocks))


# ---------------------------------------------------------------- fusion


def block_mean(states: LayerStates | Sequence[Tensor], partition: BlockPartition) -> list[Tensor]:
    layers = states.states if isinstance(states, LayerStates) else list(states)
    out = []
    for a, b in partition.blocks:
        acc = layers[a - 1]
        for l in range(a, b):
            acc = acc + layers[l]
        out.append(acc * (1.0 / (b - a + 1)) if b > a else acc)
    return out


def _key_sources(layers: list[Tensor], strategy: FusionStrategy) -> list[Tensor]:
    if isinstance(strategy, MhaBlockMean):
        return block_mean(layers, strategy.partition)
    if isinstance(strategy, MhaAll):
        return layers
    return [layers[i - 1] for i in strategy.layer_indices]


def ala_fuse(
    states: LayerStates | Sequence[Tensor],
    strategy: FusionStrategy,
    weights: Mapping[str, Tensor],
    n_heads: int,
    positions: bool = True,
    normalize: bool = True,
    return_weights: bool = False,
):
    """Fuse the encoder layer stack into one ``B x T x d`` memory.

    With ``return_weights`` also returns the head-averaged per-frame attention
    over key sources (``B x T x K``), or None for the weighted sum.
    """
    layers = states.states if isinstance(states, LayerStates) else list(states)
    validate_strategy(strategy, len(layers))
    final = layers[-1]
    if isinstance(strategy, WeightedSum):
        w = tn.softmax(weights["ala.ws"], axis=0)
        out = None
        for l, e in enumerate(layers):
            term = e * w[l]
            out = term if out is None else out + term
        return (out, None) if return_weights else out

    sources = _key_sources(layers, strategy)
    b, t, d = final.shape
    if positions:
        pe = sinusoidal_pos_enc(t, d)
        sources = [s + pe for s in sources]
    z = tn.stack(sources, axis=2)  # B x T x K x d
    query = final.reshape(b, t, 1, d)
    att, probs = multi_head_attention(query, z, weights, "ala.attn", n_heads)
    out = final + att.reshape(b, t, d)
    if normalize:
        out = tn.layer_norm(out, weights["ala.ln.g"], weights["ala.ln.b"], LN_EPS)
    if not return_weights:
        return out
    # probs: B x T x H x 1 x K
    return out, probs.data.mean(axis=2)[:, :, 0, :]


# ---------------------------------------------------------------- model bundle


@dataclass
class AsrModel:
    """Encoder-decoder weights plus an optional fusion head between them."""

    config: ModelConfig
    weights: Weights
    fusion: FusionStrategy | None = None
    ala_heads: int | None = None

    def __post_init__(self):
        if self.fusion is not None:
            validate_strategy(self.fusion, self.config.enc_layers)

    @property
    def heads(self) -> int:
        return self.ala_heads or self.config.n_heads

    @property
    def frozen_encoder(self) -> bool:
        return isinstance(self.fusion, MhaAll) and self.fusion.frozen_encoder

    def memory(self, states: LayerStates) -> Tensor:
        if self.fusion is None:
            return states.final
        return ala_fuse(states, self.fusion, self.weights, self.heads)

    def forward(self, frames, src_mask, dec_in):
        """Teacher-forced pass; returns (LayerStates, fused memory, DecoderTrace)."""
        states = encode(frames, self.config, self.weights, src_mask, frozen=self.frozen_encoder)
        memory = self.memory(states)
        return states, memory, decode(dec_in, memory, self.config, self.weights, src_mask)

    def transcribe(self, frames, src_mask=None, max_steps: int | None = None) -> list[list[int]]:
        steps = max_steps or self.config.max_tgt_len
        return greedy_decode(frames, self.config, self.weights, steps, src_mask, fuse=self.memory)

    def trainable_names(self) -> list[str]:
        names = [k for k in self.weights if not k.startswith("ala.")]
        if self.frozen_encoder:
            names = [k for k in names if not k.startswith("enc.")]
        if isinstance(self.fusion, WeightedSum):
            names.append("ala.ws")
        elif self.fusion is not None:
            names += [k for k in self.weights if k.startswith("ala.") and k != "ala.ws"]
        return names

    @classmethod
    def create(cls, config: ModelConfig, fusion: FusionStrategy | None = None, seed: int = 0,
               ala_heads: int | None = None) -> "AsrModel":
        weights = init_weights(config, seed)
        weights |= init_ala_weights(config, seed + 7919)
        return cls(config, weights, fusion, ala_heads)


def block_attention_stats(eval_set: Sequence[np.ndarray], model: AsrModel) -> dict:
    """Per-frame and dataset-mean block attention for a block-mean fused model."""
    if not isinstance(model.fusion, MhaBlockMean):
        raise ValueError("block attention statistics need the block-mean fusion strategy")
    per_frame = []
    total = np.zeros(model.fusion.partition.k)
    frames = 0
    for x in eval_set:
        states = encode(np.asarray(x)[None], model.config, model.weights)
        _, w = ala_fuse(states, model.fusion, model.weights, model.heads, return_weights=True)
        per_frame.append(w[0])
        total += w[0].sum(axis=0)
        frames += w.shape[1]
    return {"per_frame": per_frame, "dataset_mean": total / frames}
