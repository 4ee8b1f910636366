"""Command-line entry point wiring the library together.

Subcommands: synth, import, stats, train, eval, rank, serve. Exit codes:
0 ok, 2 usage, 3 data error, 4 model/checkpoint error, 5 numeric failure.
Flag values override config-file values, which override defaults; every
run that produces outputs drops a ``run_manifest.json`` beside them.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from . import __version__
from .backbone import get_backbone
from .corpus import Sample, dataset_stats, load_manifest
from .errors import DataError, ModelError, NumericError, PickrankError
from .importers import import_reverie
from .metrics import Report
from .model import ModelConfig, load_checkpoint, parameter_report, save_checkpoint
from .pipeline import evaluate_split, rank_sample
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, select_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MODEL = 4
EXIT_NUMERIC = 5

MODEL_FLAGS = {
    "l_inst": "layers_inst",
    "l_img": "layers_img",
    "heads": "heads",
    "hidden": "hidden",
    "ffn_dim": "ffn_dim",
    "n_p_max": "n_p_max",
    "n_c": "n_c",
    "temperature": "temperature",
    "variant": "variant",
}
TRAIN_FLAGS = {
    "lr": "learning_rate",
    "batch": "batch_size",
    "epochs": "max_epochs",
    "seed": "seed",
    "eval_split": "eval_split",
}


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--l-inst", type=int, help="phrase-encoder transformer layers")
    p.add_argument("--l-img", type=int, help="target/context-encoder transformer layers")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--hidden", type=int, help="transformer width")
    p.add_argument("--ffn-dim", type=int, help="transformer feedforward width")
    p.add_argument("--n-p-max", type=int, help="max phrases per instruction")
    p.add_argument("--n-c", type=int, help="context images per candidate")
    p.add_argument("--temperature", type=float, help="contrastive temperature")
    p.add_argument("--variant", choices=["full", "no_cnpe", "no_context", "baseline"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pickrank", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pickrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--envs", type=int, default=2)
    p.add_argument("--candidates-per-env", type=int, default=16)
    p.add_argument("--n-c", type=int, default=4)
    p.add_argument("--samples-per-candidate", type=int, default=1)
    p.add_argument("--val-envs", type=int, default=0)
    p.add_argument("--test-envs", type=int, default=0)
    p.add_argument("--mirror-test", action="store_true", help="copy train envs into a mirrored test split")

    p = sub.add_parser("import", help="convert a local REVERIE-style tree into a manifest")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--accept-source-license", action="store_true")
    p.add_argument("--val-scans", help="comma-separated scan ids for the val split")
    p.add_argument("--test-scans", help="comma-separated scan ids for the test split")
    p.add_argument("--n-c", type=int, default=4)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", help="train a ranking model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--backbone", default="stub", help="stub | clip | clip:<model>")
    p.add_argument("--cache-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-split", choices=["train", "val", "test"])
    _add_model_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--backbone", default="stub")
    p.add_argument("--cache-dir")
    p.add_argument("--csv", help="write the metric table as CSV here")
    p.add_argument("--out", help="write the full report as JSON here")

    p = sub.add_parser("rank", help="rank one environment for one instruction")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--backbone", default="stub")
    p.add_argument("--cache-dir")

    p = sub.add_parser("serve", help="serve the ranking API")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8777)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--backbone", default="stub")
    p.add_argument("--cache-dir")
    p.add_argument("--index-dir")
    p.add_argument("--dispatch-log", help="append pick commands to this JSONL file")

    return parser


def _write_run_manifest(out_dir: Path, command: str, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"tool": "pickrank", "tool_version": __version__, "command": command, "config": resolved}
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")


def _resolve(args: argparse.Namespace, flag_map: dict[str, str], file_config: dict, defaults) -> dict:
    resolved = {}
    for flag, field in flag_map.items():
        file_value = file_config.get(field, file_config.get(flag))
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            resolved[field] = flag_value
        elif file_value is not None:
            resolved[field] = file_value
        else:
            resolved[field] = getattr(defaults, field)
    return resolved


def _cmd_synth(args) -> int:
    config = SynthConfig(
        n_envs=args.envs,
        candidates_per_env=args.candidates_per_env,
        n_c=args.n_c,
        samples_per_candidate=args.samples_per_candidate,
        val_envs=args.val_envs,
        test_envs=args.test_envs,
        mirror_test=args.mirror_test,
    )
    result = synth_generate(config, args.seed, args.out)
    stats = dataset_stats(result.dataset)
    _write_run_manifest(Path(args.out), "synth", {"seed": args.seed, **vars(config), "out": str(args.out)})
    print(json.dumps(stats.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_import(args) -> int:
    def scan_list(value):
        return [s for s in value.split(",") if s] if value else None

    dataset = import_reverie(
        args.src,
        args.out,
        accept_license=args.accept_source_license,
        val_scans=scan_list(args.val_scans),
        test_scans=scan_list(args.test_scans),
        n_c=args.n_c,
    )
    stats = dataset_stats(dataset)
    _write_run_manifest(Path(args.out), "import", {"src": str(args.src), "out": str(args.out), "n_c": args.n_c})
    print(json.dumps(stats.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_stats(args) -> int:
    dataset = load_manifest(args.manifest)
    stats = dataset_stats(dataset).as_dict()
    for name in ("train", "val", "test"):
        part = dataset.splits.part(name)
        stats[f"{name}_envs"] = len(part.envs)
        stats[f"{name}_samples"] = len(part.samples)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    file_config = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        file_config = json.loads(path.read_text("utf-8"))

    model_values = _resolve(args, MODEL_FLAGS, file_config, ModelConfig())
    train_values = _resolve(args, TRAIN_FLAGS, file_config, TrainConfig())
    model_config = ModelConfig(**model_values)
    train_config = TrainConfig(**train_values)

    dataset = load_manifest(args.manifest)
    backbone = get_backbone(args.backbone, args.cache_dir)
    out_dir = Path(args.out_dir)
    result = train(
        train_config,
        model_config,
        dataset,
        backbone,
        out_dir=out_dir,
        log_file=out_dir / "metrics.jsonl",
    )
    try:
        best = select_model(result.records)
    except DataError:
        best = result.records[-1]
    if best.checkpoint_path is not None:
        # best.ckpt must hold the selected epoch's weights, not the final ones
        shutil.copyfile(best.checkpoint_path, out_dir / "best.ckpt")
    else:
        save_checkpoint(out_dir / "best.ckpt", result.model, epoch=best.epoch, val_metrics=best.val_metrics)
    _write_run_manifest(
        out_dir,
        "train",
        {
            "manifest": str(args.manifest),
            "backbone": args.backbone,
            "model": model_config.as_dict(),
            "train": {k: getattr(train_config, k) for k in TRAIN_FLAGS.values()},
            "parameters": parameter_report(result.model),
        },
    )
    print(
        json.dumps(
            {
                "epochs": len(result.records),
                "final_train_loss": result.records[-1].train_loss,
                "best_epoch": best.epoch,
                "best_val_metrics": best.val_metrics,
                "out_dir": str(out_dir),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def _load_for_inference(args):
    dataset = load_manifest(args.manifest)
    model, payload = load_checkpoint(args.checkpoint)
    backbone = get_backbone(args.backbone, getattr(args, "cache_dir", None))
    if backbone.backbone.dim != model.config.input_dim:
        raise ModelError(
            f"backbone width {backbone.backbone.dim} does not match checkpoint input width "
            f"{model.config.input_dim}"
        )
    return dataset, model, backbone


def _cmd_eval(args) -> int:
    dataset, model, backbone = _load_for_inference(args)
    report: Report = evaluate_split(model, dataset, args.split, backbone)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), "utf-8")
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_json() + "\n", "utf-8")
        _write_run_manifest(
            out.parent,
            "eval",
            {"manifest": str(args.manifest), "checkpoint": str(args.checkpoint), "split": args.split},
        )
    return EXIT_OK


def _cmd_rank(args) -> int:
    dataset, model, backbone = _load_for_inference(args)
    env = dataset.environments.get(args.env)
    if env is None:
        raise DataError(f"unknown environment {args.env!r}")
    if not (1 <= args.top_k <= len(env.candidates)):
        raise DataError(f"top-k must be in [1, {len(env.candidates)}], got {args.top_k}")
    # ad-hoc query: relevance is unknown, only the ranking is printed
    sample = Sample(sample_id="adhoc", env_id=args.env, instruction=args.instruction, relevant_ids=frozenset({"*"}))
    ranked = rank_sample(model, backbone, dataset, sample)
    print(f"{'rank':>4}  {'score':>9}  candidate")
    for pos, (cid, score) in enumerate(ranked.entries[: args.top_k], start=1):
        print(f"{pos:>4}  {score:>9.4f}  {cid}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import LogFileSink, RankingService, create_app

    dataset, model, backbone = _load_for_inference(args)
    sink = LogFileSink(args.dispatch_log) if args.dispatch_log else None
    service = RankingService(dataset, model, backbone, index_dir=args.index_dir, sink=sink)
    for env_id in dataset.environments:
        service.ensure_index(env_id)
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "import": _cmd_import,
    "stats": _cmd_stats,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "rank": _cmd_rank,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PickrankError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
