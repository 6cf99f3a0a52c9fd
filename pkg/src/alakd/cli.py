"""Command-line driver: ``alakd {gen-data,train,eval,analyze-layers,ablation}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as ex


def _paths(cfg: ex.ExperimentConfig, args) -> tuple[Path, Path]:
    out = Path(cfg.out_dir)
    teacher = Path(args.teacher) if getattr(args, "teacher", None) else out / "teacher.ckpt"
    return out, teacher


def _load_teacher(cfg, path: Path):
    if not path.exists():
        raise ex.PipelineError(f"missing teacher checkpoint {path}; run `alakd train --stage teacher` first")
    header, model = ex.read_checkpoint(path)
    _check_hash(cfg, header, path)
    return model


def _check_hash(cfg, header: dict, path: Path) -> None:
    if header["config_hash"] != cfg.hash():
        raise ex.PipelineError(
            f"checkpoint {path} has config hash {header['config_hash']} but the supplied config hashes to "
            f"{cfg.hash()}")


def cmd_gen_data(cfg, args) -> None:
    summary = ex.generate_data(cfg)
    print(f"wrote {summary['train']} train utterances ({summary['train_noise_only']} noise-only), "
          f"{summary['test_per_condition']} per test condition, {summary['test_noise_only']} noise-only test "
          f"to {ex.data_dir(cfg)}")
    print(f"train SNR range [{summary['train_snr_min']:.2f}, {summary['train_snr_max']:.2f}] dB; "
          f"histogram {summary['train_snr_histogram']['counts']}")


def cmd_train(cfg, args) -> None:
    out, teacher_path = _paths(cfg, args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"{args.stage}.ckpt"
    log_path = ckpt.with_suffix(".metrics.jsonl")
    corpus = ex.load_data(cfg)
    if args.stage == "teacher":
        res = ex.train_teacher(cfg, corpus)
    else:
        teacher = _load_teacher(cfg, teacher_path)
        if args.stage == "ala":
            res = ex.train_fusion(cfg, teacher, corpus)
        else:
            res = ex.train_distilled(cfg, teacher, corpus)
    ex.save_checkpoint(ckpt, res.model, cfg.hash(), len(res.history), args.stage)
    res.write_log(log_path)
    last = res.history[-1] if res.history else {}
    print(f"stage {args.stage}: {len(res.history)} steps, final loss "
          f"{json.dumps({k: v for k, v in last.items() if k not in ('step', 'lr', 'lr_ala', 'wall_time')})}; "
          f"checkpoint {ckpt}")


def cmd_eval(cfg, args) -> None:
    if not args.checkpoint:
        raise ex.PipelineError("eval needs --checkpoint")
    path = Path(args.checkpoint)
    header, model = ex.read_checkpoint(path)
    _check_hash(cfg, header, path)
    report = ex.evaluate(model, ex.load_data(cfg), cfg.hash())
    out = Path(cfg.out_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{path.stem}.json").write_text(report.to_json())
    (out / f"{path.stem}.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")


def cmd_analyze_layers(cfg, args) -> None:
    if not args.checkpoint:
        raise ex.PipelineError("analyze-layers needs --checkpoint")
    path = Path(args.checkpoint)
    header, model = ex.read_checkpoint(path)
    _check_hash(cfg, header, path)
    out = Path(cfg.out_dir) / "analysis" / path.stem
    res = ex.analyze_layers(cfg, model, ex.load_data(cfg), out, True if args.block_attention else None)
    msg = f"partition {res['partition'].to_list()}"
    if "block_attention" in res:
        msg += f"; dataset-mean block attention {res['block_attention']['dataset_mean'].round(4).tolist()}"
    print(f"{msg}; files in {out}")


def cmd_ablation(cfg, args) -> None:
    out, teacher_path = _paths(cfg, args)
    if args.grid not in ("fusion", "kd_loss"):
        raise ex.PipelineError(f"unknown ablation grid {args.grid!r}; choose fusion or kd_loss")
    corpus = ex.load_data(cfg)
    teacher = _load_teacher(cfg, teacher_path)
    table = ex.run_ablation(cfg, args.grid, teacher, corpus,
                            progress=lambda name: print(f"done: {name}", file=sys.stderr))
    path = out / f"ablation_{args.grid}.csv"
    path.write_text(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alakd", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults fill anything missing)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=["teacher", "ala", "distill"])
    t.add_argument("--checkpoint", help="where to write the checkpoint (default <out>/<stage>.ckpt)")
    t.add_argument("--teacher", help="teacher checkpoint (default <out>/teacher.ckpt)")

    e = sub.add_parser("eval", parents=[common], help="per-SNR WER report")
    e.add_argument("--checkpoint", required=True)

    a = sub.add_parser("analyze-layers", parents=[common], help="layer similarity, partition, block attention")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--block-attention", action="store_true", help="fail unless block attention can be computed")

    b = sub.add_parser("ablation", parents=[common], help="fusion or KD-loss comparison table")
    b.add_argument("--grid", required=True, help="fusion or kd_loss")
    b.add_argument("--teacher", help="teacher checkpoint (default <out>/teacher.ckpt)")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-layers": cmd_analyze_layers,
    "ablation": cmd_ablation,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ex.load_config(args.config, args.seed, args.out)
        COMMANDS[args.command](cfg, args)
    except (ex.PipelineError, ValueError, KeyError, OSError, json.JSONDecodeError) as err:
        msg = str(err).replace("\n", " ")
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
