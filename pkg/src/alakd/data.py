"""Synthetic paired clean/noisy corpus.

Each token id owns a fixed random frame pattern; an utterance is the
concatenation of its tokens' patterns plus a slow drift. Noisy copies are
made by mixing a noise source at a target SNR, where power is the mean
square over all frame entries.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import BOS, EOS, PAD

N_SPECIAL = 3
TEST_SNRS: tuple[float | None, ...] = (-10.0, -5.0, 0.0, 5.0, 10.0, None)
TRAIN_SNR_RANGE = (-8.0, 4.0)
NOISE_ONLY_FRACTION = 0.01


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 16
    min_len: int = 2
    max_len: int = 5
    feature_dim: int = 16
    frames_per_token: int = 4
    num_train: int = 1000
    num_test: int = 200
    num_test_noise_only: int = 100
    drift: float = 0.2
    noise_kinds: tuple[str, ...] = ("babble", "gaussian")
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size must exceed the 3 reserved tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if min(self.feature_dim, self.frames_per_token) < 1:
            raise ValueError("feature_dim and frames_per_token must be >= 1")
        object.__setattr__(self, "noise_kinds", tuple(self.noise_kinds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_kinds"] = list(self.noise_kinds)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def max_frames(self) -> int:
        return self.max_len * self.frames_per_token


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    clean: np.ndarray
    noisy: np.ndarray
    snr_db: float | None  # None marks the clean condition
    is_noise_only: bool = False

    @property
    def n_frames(self) -> int:
        return self.clean.shape[0]


@dataclass
class SplitManifest:
    name: str
    ids: list[str]
    snr_db: list[float | None]
    seed: int
    spec_hash: str
    noise_only: list[bool] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        return cls(**json.loads(text))


def derive_seed(seed: int, key: str) -> int:
    """Order-independent per-item seed so parallel and serial generation agree."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10.0 * math.log10(power(clean) / power(noisy - clean))


# ---------------------------------------------------------------- signal synthesis


def token_patterns(spec: CorpusSpec) -> np.ndarray:
    """``V x frames_per_token x feature_dim`` fixed pattern per token id."""
    rng = np.random.default_rng(derive_seed(spec.seed, "token-patterns"))
    return rng.standard_normal((spec.vocab_size, spec.frames_per_token, spec.feature_dim))


def synthesize_clean(tokens: Sequence[int], spec: CorpusSpec, seed: int,
                     patterns: np.ndarray | None = None) -> np.ndarray:
    tokens = list(tokens)
    if any(not 0 <= t < spec.vocab_size for t in tokens):
        raise ValueError("token outside vocabulary")
    if not tokens:
        return np.zeros((0, spec.feature_dim))
    if patterns is None:
        patterns = token_patterns(spec)
    frames = patterns[tokens].reshape(-1, spec.feature_dim)
    rng = np.random.default_rng(seed)
    t = np.arange(frames.shape[0])[:, None]
    freq = rng.uniform(0.02, 0.1, size=(1, spec.feature_dim))
    phase = rng.uniform(0, 2 * np.pi, size=(1, spec.feature_dim))
    return frames + spec.drift * np.sin(2 * np.pi * freq * t + phase)


def noise_source(kind: str, shape: tuple[int, int], seed: int, spec: CorpusSpec | None = None,
                 patterns: np.ndarray | None = None) -> np.ndarray:
    """Unit-variance white noise, or babble: four time-shifted random
    utterances summed and normalised to unit power."""
    rng = np.random.default_rng(seed)
    n, f = shape
    if kind == "gaussian":
        return rng.standard_normal(shape)
    if kind != "babble":
        raise ValueError(f"unknown noise kind {kind!r}")
    if spec is None:
        spec = CorpusSpec(feature_dim=f)
    if patterns is None:
        patterns = token_patterns(spec)
    n_tok = -(-n // spec.frames_per_token) + 1
    out = np.zeros(shape)
    for _ in range(4):
        toks = rng.integers(N_SPECIAL, spec.vocab_size, size=n_tok)
        talker = synthesize_clean(toks, spec, int(rng.integers(2**63)), patterns)
        out += np.roll(talker, int(rng.integers(talker.shape[0])), axis=0)[:n]
    p = power(out)
    return out / math.sqrt(p) if p > 0 else out


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float | None) -> np.ndarray:
    """``clean + alpha * noise`` with alpha chosen so the mixture hits ``snr_db``.

    ``snr_db=None`` is the clean condition and returns ``clean`` unchanged.
    """
    if snr_db is None:
        return clean.copy()
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs noise {noise.shape}")
    p_clean, p_noise = power(clean), power(noise)
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    if p_noise <= 0:
        raise ValueError("noise has zero power; cannot reach a finite SNR")
    alpha = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + alpha * noise


# ---------------------------------------------------------------- utterances / splits


def _transcript(spec: CorpusSpec, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return [int(t) for t in rng.integers(N_SPECIAL, spec.vocab_size, size=n)]


def make_utterance(spec: CorpusSpec, split: str, index: int, snr_db: float | None,
                   noise_only: bool = False, noise_key: str | None = None,
                   patterns: np.ndarray | None = None) -> Utterance:
    """Build one utterance. ``noise_key`` lets several conditions share the
    same transcript and noise draw (only the mixing level then differs)."""
    uid = f"{split}-{index:05d}"
    base = derive_seed(spec.seed, noise_key or uid)
    rng = np.random.default_rng(base)
    tokens = _transcript(spec, rng)
    kind = spec.noise_kinds[int(rng.integers(len(spec.noise_kinds)))]
    if patterns is None:
        patterns = token_patterns(spec)
    clean = synthesize_clean(tokens, spec, derive_seed(base, "clean"), patterns)
    if noise_only:
        noise = noise_source("babble", clean.shape, derive_seed(base, "noise"), spec, patterns)
        return Utterance(uid, [], np.zeros_like(clean), noise, None, True)
    noise = noise_source(kind, clean.shape, derive_seed(base, "noise"), spec, patterns)
    return Utterance(uid, tokens, clean, mix_at_snr(clean, noise, snr_db), snr_db)


def snr_label(snr: float | None) -> str:
    return "clean" if snr is None else f"{snr:+g}"


def train_plan(spec: CorpusSpec) -> tuple[set[int], np.ndarray]:
    """Indices of the noise-only train utterances and the per-utterance SNR draw."""
    rng = np.random.default_rng(derive_seed(spec.seed, "train-split"))
    n = spec.num_train
    n_noise = round(NOISE_ONLY_FRACTION * n)
    noise_idx = set(rng.choice(n, size=n_noise, replace=False).tolist()) if n_noise else set()
    return noise_idx, rng.uniform(*TRAIN_SNR_RANGE, size=n)


def build_splits(spec: CorpusSpec) -> dict:
    """Train manifest, six test manifests keyed by SNR (None = clean), and a
    noise-only test manifest, plus the utterances themselves."""
    noise_idx, snrs = train_plan(spec)
    n = spec.num_train
    patterns = token_patterns(spec)
    train = []
    for i in range(n):
        is_noise = i in noise_idx
        train.append(make_utterance(spec, "train", i, None if is_noise else float(snrs[i]),
                                    is_noise, patterns=patterns))
    manifests = {"train": _manifest("train", train, spec)}
    test: dict[float | None, list[Utterance]] = {}
    for snr in TEST_SNRS:
        utts = []
        for i in range(spec.num_test):
            u = make_utterance(spec, "test", i, snr, noise_key=f"test-{i:05d}", patterns=patterns)
            u.id = f"test{snr_label(snr)}-{i:05d}"
            utts.append(u)
        test[snr] = utts
        manifests[f"test_{snr_label(snr)}"] = _manifest(f"test_{snr_label(snr)}", utts, spec)
    noise_only = [
        make_utterance(spec, "noiseonly", i, None, noise_only=True, patterns=patterns)
        for i in range(spec.num_test_noise_only)
    ]
    manifests["test_noise_only"] = _manifest("test_noise_only", noise_only, spec)
    return {"train": train, "test": test, "noise_only": noise_only, "manifests": manifests}


def _manifest(name: str, utts: list[Utterance], spec: CorpusSpec) -> SplitManifest:
    return SplitManifest(
        name=name,
        ids=[u.id for u in utts],
        snr_db=[u.snr_db for u in utts],
        seed=spec.seed,
        spec_hash=spec.hash(),
        noise_only=[u.is_noise_only for u in utts],
    )


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    frames: np.ndarray        # B x T x F (noisy by default)
    clean: np.ndarray         # B x T x F
    src_mask: np.ndarray      # B x T bool
    dec_in: np.ndarray        # B x U
    targets: np.ndarray       # B x U
    tgt_mask: np.ndarray      # B x U bool
    noise_only: np.ndarray    # B bool
    refs: list[list[int]]


def collate(utts: Sequence[Utterance], use_clean: bool = False) -> Batch:
    """Pad a list of utterances; ``use_clean`` feeds clean frames as input."""
    b = len(utts)
    t = max(u.n_frames for u in utts)
    u_len = max(len(u.tokens) for u in utts) + 1
    f = utts[0].clean.shape[1]
    frames = np.zeros((b, t, f))
    clean = np.zeros((b, t, f))
    src_mask = np.zeros((b, t), bool)
    dec_in = np.full((b, u_len), PAD, np.int64)
    targets = np.full((b, u_len), PAD, np.int64)
    tgt_mask = np.zeros((b, u_len), bool)
    for i, u in enumerate(utts):
        n = u.n_frames
        frames[i, :n] = u.clean if use_clean else u.noisy
        clean[i, :n] = u.clean
        src_mask[i, :n] = True
        seq = [BOS] + u.tokens
        dec_in[i, : len(seq)] = seq
        targets[i, : len(seq)] = u.tokens + [EOS]
        tgt_mask[i, : len(seq)] = True
    return Batch(frames, clean, src_mask, dec_in, targets, tgt_mask,
                 np.array([u.is_noise_only for u in utts]), [list(u.tokens) for u in utts])


# ---------------------------------------------------------------- disk format


def write_split(directory: Path, name: str, utts: Sequence[Utterance], manifest: SplitManifest) -> None:
    """Manifest JSON, little-endian float32 clean/noisy blobs and a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.manifest.json").write_text(manifest.to_json())
    shapes, tokens, offsets = [], [], []
    off = 0
    for u in utts:
        shapes.append(list(u.clean.shape))
        tokens.append(list(u.tokens))
        offsets.append(off)
        off += u.clean.size
    for kind in ("clean", "noisy"):
        arr = np.concatenate([getattr(u, kind).reshape(-1) for u in utts]) if utts else np.zeros(0)
        (directory / f"{name}.{kind}.f32").write_bytes(arr.astype("<f4").tobytes())
    sidecar = {"dtype": "<f4", "shapes": shapes, "offsets": offsets, "tokens": tokens,
               "blobs": {"clean": f"{name}.clean.f32", "noisy": f"{name}.noisy.f32"}}
    (directory / f"{name}.frames.json").write_text(json.dumps(sidecar, sort_keys=True))


def read_split(directory: Path, name: str) -> tuple[SplitManifest, list[Utterance]]:
    directory = Path(directory)
    manifest = SplitManifest.from_json((directory / f"{name}.manifest.json").read_text())
    side = json.loads((directory / f"{name}.frames.json").read_text())
    blobs = {k: np.frombuffer((directory / v).read_bytes(), dtype="<f4").astype(np.float64)
             for k, v in side["blobs"].items()}
    utts = []
    for i, uid in enumerate(manifest.ids):
        shape, off = side["shapes"][i], side["offsets"][i]
        size = shape[0] * shape[1]
        utts.append(Utterance(
            uid, side["tokens"][i],
            blobs["clean"][off:off + size].reshape(shape),
            blobs["noisy"][off:off + size].reshape(shape),
            manifest.snr_db[i], manifest.noise_only[i],
        ))
    return manifest, utts
