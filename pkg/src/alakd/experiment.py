"""Declarative experiment configs, the checkpoint file format, and the
stage-by-stage pipeline the command line drives."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .ala import (
    AsrModel, BlockPartition, MhaAll, MhaBlockMean, MhaSelected, WeightedSum, block_attention_stats,
    layer_similarity, partition_layers, strategy_from_dict, strategy_to_dict,
)
from .data import TEST_SNRS, CorpusSpec, Utterance, build_splits, read_split, snr_label, write_split
from .distill import (
    EXCLUDED_ABLATIONS, LOSS_ABLATIONS, KdConfig, Schedule, TrainResult, train_ce, train_stage1,
    train_stage2_distill,
)
from .metrics import SnrReport, evaluate_model
from .model import ModelConfig, copy_weights
from .tensor import Tensor

SCHEMA_VERSION = 1
FUSION_KINDS = ("weighted_sum", "mha_all_frozen", "mha_all", "mha_first", "mha_last", "mha_middle", "mha_mean")
FUSION_ROW_NAMES = {
    "weighted_sum": "Weighted Sum",
    "mha_all_frozen": "MHA all frozen",
    "mha_all": "MHA all",
    "mha_first": "MHA first-of-block",
    "mha_last": "MHA last-of-block",
    "mha_middle": "MHA middle-of-block",
    "mha_mean": "MHA Mean",
}


class PipelineError(RuntimeError):
    """A user-facing failure (missing artifact, mismatched config...)."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class AlaSettings:
    fusion: str = "mha_mean"
    threshold: float = 0.9
    heads: int | None = None
    analysis_utterances: int = 20
    zero_init_out: bool = True

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion {self.fusion!r}; choose from {', '.join(FUSION_KINDS)}")
        if not -1 < self.threshold < 1:
            raise ValueError("threshold must lie in (-1, 1)")


def _default_schedules() -> dict[str, Schedule]:
    return {
        "teacher": Schedule(steps=600, warmup=50, kind="cosine", peak_base=2e-3, peak_ala=2e-3),
        "ala": Schedule(steps=400, warmup=40, kind="cosine", peak_base=1e-3, peak_ala=1.8e-3),
        "distill": Schedule(steps=400, warmup=20, kind="linear", peak_base=1e-3, peak_ala=1.8e-3),
    }


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    data: CorpusSpec = CorpusSpec()
    ala: AlaSettings = AlaSettings()
    kd: KdConfig = KdConfig()
    student_ala: bool = True
    schedules: Mapping[str, Schedule] = field(default_factory=_default_schedules)
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "ala": asdict(self.ala),
            "kd": self.kd.to_dict(),
            "student_ala": self.student_ala,
            "schedules": {k: v.to_dict() for k, v in sorted(self.schedules.items())},
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        """Missing keys fall back to the defaults; unknown keys are errors."""
        known = {"version", "model", "data", "ala", "kd", "student_ala", "schedules", "seed", "out_dir"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        if d.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported config version {d['version']}")
        base = cls()
        schedules = dict(base.schedules)
        for k, v in d.get("schedules", {}).items():
            if k not in schedules:
                raise ValueError(f"unknown schedule {k!r}")
            schedules[k] = replace(schedules[k], **v)
        data = dict(d.get("data", {}))
        if "noise_kinds" in data:
            data["noise_kinds"] = tuple(data["noise_kinds"])
        return cls(
            model=replace(base.model, **d.get("model", {})),
            data=replace(base.data, **data),
            ala=replace(base.ala, **d.get("ala", {})),
            kd=KdConfig.from_dict(d.get("kd", {})),
            student_ala=bool(d.get("student_ala", base.student_ala)),
            schedules=schedules,
            seed=int(d.get("seed", base.seed)),
            out_dir=str(d.get("out_dir", base.out_dir)),
        )

    def hash(self) -> str:
        """Hash of everything that shapes results; the output location is excluded."""
        d = self.to_dict()
        del d["out_dir"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def corpus(self) -> CorpusSpec:
        return replace(self.data, seed=self.seed)


def load_config(path: str | Path | None = None, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig() if path is None else ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ALAKDCK1"


def save_checkpoint(path: str | Path, model: AsrModel, config_hash: str, step: int, stage: str) -> None:
    """Magic, u64 header length, JSON header, then float32 LE weights in manifest order."""
    manifest, offset, blobs = [], 0, []
    for name, t in model.weights.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {
        "config_hash": config_hash,
        "dtype": "<f4",
        "step": step,
        "stage": stage,
        "model": model.config.to_dict(),
        "fusion": strategy_to_dict(model.fusion),
        "ala_heads": model.ala_heads,
        "params": manifest,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs))


def read_checkpoint(path: str | Path) -> tuple[dict, AsrModel]:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise PipelineError(f"not a checkpoint file: {path}")
    (n,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + n])
    payload = np.frombuffer(buf[16 + n:], dtype="<f4")
    expected = sum(int(np.prod(p["shape"])) for p in header["params"])
    if payload.size != expected:
        raise PipelineError(f"truncated checkpoint {path}: {payload.size} of {expected} values")
    weights = {}
    for p in header["params"]:
        size = int(np.prod(p["shape"]))
        arr = payload[p["offset"]:p["offset"] + size].astype(np.float64).reshape(p["shape"])
        weights[p["name"]] = Tensor(arr, requires_grad=True, name=p["name"])
    config = ModelConfig(**header["model"])
    model = AsrModel(config, weights, strategy_from_dict(header["fusion"]), header["ala_heads"])
    return header, model


# ---------------------------------------------------------------- data


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "data"


def split_names() -> list[str]:
    return ["train", *[f"test_{snr_label(s)}" for s in TEST_SNRS], "test_noise_only"]


def generate_data(cfg: ExperimentConfig) -> dict:
    """Write every split to disk and return a summary."""
    splits = build_splits(cfg.corpus)
    out = data_dir(cfg)
    groups = {"train": splits["train"], "test_noise_only": splits["noise_only"]}
    groups |= {f"test_{snr_label(s)}": splits["test"][s] for s in TEST_SNRS}
    for name in split_names():
        write_split(out, name, groups[name], splits["manifests"][name])
    snrs = [u.snr_db for u in splits["train"] if not u.is_noise_only]
    hist, edges = np.histogram(snrs, bins=12, range=(-8, 4))
    summary = {
        "config_hash": cfg.hash(),
        "spec_hash": cfg.corpus.hash(),
        "train": len(splits["train"]),
        "train_noise_only": sum(u.is_noise_only for u in splits["train"]),
        "test_per_condition": cfg.corpus.num_test,
        "test_noise_only": len(splits["noise_only"]),
        "train_snr_min": min(snrs) if snrs else None,
        "train_snr_max": max(snrs) if snrs else None,
        "train_snr_histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


@dataclass
class Corpus:
    train: list[Utterance]
    test: dict[float | None, list[Utterance]]
    noise_only: list[Utterance]
    spec_hash: str


def load_data(cfg: ExperimentConfig) -> Corpus:
    d = data_dir(cfg)
    if not (d / "train.manifest.json").exists():
        raise PipelineError(f"no generated data under {d}; run gen-data first")
    manifest, train = read_split(d, "train")
    if manifest.spec_hash != cfg.corpus.hash():
        raise PipelineError(f"data under {d} was generated from a different corpus spec")
    test = {s: read_split(d, f"test_{snr_label(s)}")[1] for s in TEST_SNRS}
    return Corpus(train, test, read_split(d, "test_noise_only")[1], manifest.spec_hash)


def corpus_in_memory(cfg: ExperimentConfig) -> Corpus:
    s = build_splits(cfg.corpus)
    return Corpus(s["train"], s["test"], s["noise_only"], cfg.corpus.hash())


# ---------------------------------------------------------------- stages


def analysis_set(corpus: Corpus, n: int) -> list[np.ndarray]:
    """Clean frames of the first ``n`` speech utterances of the train split."""
    return [u.clean for u in corpus.train if not u.is_noise_only][:n]


def fusion_for(kind: str, partition: BlockPartition) -> object:
    if kind == "weighted_sum":
        return WeightedSum()
    if kind == "mha_all_frozen":
        return MhaAll(frozen_encoder=True)
    if kind == "mha_all":
        return MhaAll()
    if kind == "mha_mean":
        return MhaBlockMean(partition)
    which = kind.removeprefix("mha_")
    return MhaSelected(partition.representatives(which))


def derive_partition(cfg: ExperimentConfig, teacher: AsrModel, corpus: Corpus) -> tuple[np.ndarray, BlockPartition]:
    sim = layer_similarity(analysis_set(corpus, cfg.ala.analysis_utterances), teacher.config, teacher.weights)
    return sim, partition_layers(sim, cfg.ala.threshold)


def fused_student(cfg: ExperimentConfig, teacher: AsrModel, fusion) -> AsrModel:
    """A copy of the teacher carrying a fusion head. A zero output projection
    makes the head start as an identity map on the final layer."""
    model = AsrModel(teacher.config, copy_weights(teacher.weights), fusion, cfg.ala.heads)
    if fusion is not None and not isinstance(fusion, WeightedSum) and cfg.ala.zero_init_out:
        model.weights["ala.attn.wo"].data[:] = 0.0
    return model


def train_teacher(cfg: ExperimentConfig, corpus: Corpus, log: Callable | None = None) -> TrainResult:
    model = AsrModel.create(cfg.model, seed=cfg.seed)
    return train_ce(corpus.train, model, cfg.schedules["teacher"], seed=cfg.seed, use_clean=True, log=log)


def train_baseline(cfg: ExperimentConfig, teacher: AsrModel, corpus: Corpus, log=None) -> TrainResult:
    """Noisy-input CE fine-tuning with no fusion head (the plain baseline)."""
    model = fused_student(cfg, teacher, None)
    return train_ce(corpus.train, model, cfg.schedules["ala"], seed=cfg.seed + 1, log=log)


def train_fusion(cfg: ExperimentConfig, teacher: AsrModel, corpus: Corpus, kind: str | None = None,
                 partition: BlockPartition | None = None, log=None) -> TrainResult:
    if partition is None:
        partition = derive_partition(cfg, teacher, corpus)[1]
    model = fused_student(cfg, teacher, fusion_for(kind or cfg.ala.fusion, partition))
    return train_stage1(corpus.train, model, cfg.schedules["ala"], seed=cfg.seed + 1, log=log)


def train_distilled(cfg: ExperimentConfig, teacher: AsrModel, corpus: Corpus, kd: KdConfig | None = None,
                    student_ala: bool | None = None, student: AsrModel | None = None,
                    partition: BlockPartition | None = None, log=None) -> TrainResult:
    kd = kd or cfg.kd
    if student is None:
        fusion = None
        if cfg.student_ala if student_ala is None else student_ala:
            if partition is None:
                partition = derive_partition(cfg, teacher, corpus)[1]
            fusion = fusion_for(cfg.ala.fusion, partition)
        student = fused_student(cfg, teacher, fusion)
    return train_stage2_distill(corpus.train, teacher, student, kd, cfg.schedules["distill"],
                                seed=cfg.seed + 2, log=log)


def evaluate(model: AsrModel, corpus: Corpus, config_hash: str = "") -> SnrReport:
    return evaluate_model(model, corpus.test, corpus.noise_only, config_hash)


# ---------------------------------------------------------------- analysis output


def matrix_csv(rows: np.ndarray, header: list[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    for r in np.atleast_2d(rows):
        w.writerow([f"{v:.17g}" for v in r])
    return buf.getvalue()


def analyze_layers(cfg: ExperimentConfig, model: AsrModel, corpus: Corpus, out: Path,
                   with_stats: bool | None = None) -> dict:
    """Similarity matrix, derived partition, and block attention when available."""
    out.mkdir(parents=True, exist_ok=True)
    frames = analysis_set(corpus, cfg.ala.analysis_utterances)
    sim = layer_similarity(frames, model.config, model.weights)
    part = partition_layers(sim, cfg.ala.threshold)
    (out / "similarity.csv").write_text(matrix_csv(sim))
    (out / "partition.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "threshold": cfg.ala.threshold, "blocks": part.to_list()},
        indent=1, sort_keys=True))
    result = {"similarity": sim, "partition": part}
    want = isinstance(model.fusion, MhaBlockMean) if with_stats is None else with_stats
    if want:
        if not isinstance(model.fusion, MhaBlockMean):
            raise PipelineError("block attention needs a checkpoint trained with the mha_mean fusion")
        noisy = [u.noisy for u in corpus.test[-10.0]]
        stats = block_attention_stats(noisy, model)
        k = model.fusion.partition.k
        rows = [[i, t, *w] for i, pf in enumerate(stats["per_frame"]) for t, w in enumerate(pf)]
        per_frame = matrix_csv(np.array(rows), ["utterance", "frame", *[f"block{j}" for j in range(k)]])
        (out / "block_attention.csv").write_text(per_frame)
        (out / "block_attention_mean.csv").write_text(
            matrix_csv(stats["dataset_mean"][None], [f"block{j}" for j in range(k)]))
        result["block_attention"] = stats
    return result


# ---------------------------------------------------------------- ablations


def run_ablation(cfg: ExperimentConfig, grid: str, teacher: AsrModel, corpus: Corpus,
                 progress: Callable[[str], None] | None = None) -> str:
    """One CSV row per configuration with WER at -10 dB and clean."""
    if grid not in ("fusion", "kd_loss"):
        raise PipelineError(f"unknown ablation grid {grid!r}; choose fusion or kd_loss")
    partition = derive_partition(cfg, teacher, corpus)[1]
    rows = []
    if grid == "fusion":
        for kind in FUSION_KINDS:
            res = train_fusion(cfg, teacher, corpus, kind, partition)
            rows.append((FUSION_ROW_NAMES[kind], strategy_to_dict(res.model.fusion), res.model))
            if progress:
                progress(FUSION_ROW_NAMES[kind])
    else:
        for row in LOSS_ABLATIONS:
            res = train_distilled(cfg, teacher, corpus, row.kd_config(cfg.kd), row.student_ala,
                                  partition=partition)
            rows.append((row.name, sorted(row.enabled), res.model))
            if progress:
                progress(row.name)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["configuration", "wer_snr_-10", "wer_clean", "noise_only_insertion_rate", "spec_hash",
                "config_hash", "detail"])
    for name, detail, model in rows:
        rep = evaluate_model(model, {-10.0: corpus.test[-10.0], None: corpus.test[None]}, corpus.noise_only)
        w.writerow([name, repr(rep.wer_at("-10")), repr(rep.wer_at("clean")),
                    repr(rep.noise_only_insertion_rate), corpus.spec_hash, cfg.hash(),
                    json.dumps(detail, sort_keys=True)])
    if grid == "kd_loss":
        for name in EXCLUDED_ABLATIONS:
            w.writerow([f"# {name} not implemented (defined only in external work)", "", "", "", "", "", ""])
    return buf.getvalue()
