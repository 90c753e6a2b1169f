"""Command-line entry point: ``dualseg {datagen,train,eval,gradcheck}``.

Exit codes: 0 success, 2 config or I/O error, 3 dataset schema violation,
4 checkpoint/config mismatch, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import CheckpointError, load_checkpoint, load_state_into, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, read_config_file
from .datagen.dataset import DatasetError, generate_dataset, load_split, write_manifest
from .model import build

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERICS = 0, 2, 3, 4, 5
RUN_CONFIG_NAME = "run_config.yaml"



class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _out_dir(path: Optional[str], required: bool = True) -> Optional[Path]:
    """Create ``path`` (but never its parent) and return it."""
    if path is None:
        if required:
            raise CommandError(EXIT_CONFIG, "an output directory is required (--out)")
        return None
    out = Path(path)
    if not out.parent.exists():
        raise CommandError(EXIT_CONFIG, f"output parent directory does not exist: {out.parent}")
    try:
        out.mkdir(exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _require(value: Optional[str], what: str, flag: str) -> Path:
    if value is None:
        raise CommandError(EXIT_CONFIG, f"no {what} given ({flag} or '{flag.lstrip('-')}' in the config)")
    path = Path(value)
    if not path.exists():
        raise CommandError(EXIT_CONFIG, f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_datagen(cfg: RunConfig) -> int:
    out = _out_dir(cfg.out)
    t0 = time.time()
    generate_dataset(out, split=cfg.split, n_frames=cfg.n_frames, frame_hw=cfg.frame_hw,
                     n_tools=cfg.n_tools, seed=cfg.seed)
    manifest = write_manifest(out)
    # after the manifest: the record holds the output path, which is not content
    cfg.save(out / RUN_CONFIG_NAME)
    n_files = len(json.loads(manifest.read_text())["files"])
    print(f"wrote {cfg.n_videos} videos x {cfg.n_frames} frames to {out} "
          f"({n_files} files, {time.time() - t0:.1f} s); manifest {manifest}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: Optional[str] = None) -> int:
    from .trainer import resume_state, train

    dataset = _require(cfg.dataset, "dataset", "--dataset")
    out = _out_dir(cfg.out)
    splits = {name: load_split(dataset, name) for name in ("train", "val")}
    state = None
    if resume is not None:
        rdir = _require(resume, "resume directory", "--resume")
        net = build(cfg.model_config(), seed=0)
        load_state_into(net, load_checkpoint(rdir / "last.dseg"))
        state = resume_state(net, rdir / "optimizer.dseg")
        print(f"resuming from step {state.step}")
    cfg.save(out / RUN_CONFIG_NAME)

    def show(rec):
        if rec["val_iou"] is not None:
            print(f"step {rec['step']:5d}  loss {rec['loss_total']:.4f}  val IoU {rec['val_iou']:.4f}")

    t0 = time.time()
    state = train(splits, cfg.model_config(), cfg.train_config(), out_dir=out, state=state, log=show)
    if state.best_checkpoint_path is None:
        # zero steps requested, so nothing was validated; keep the current weights
        save_checkpoint(out / "best.dseg", state.net.state_dict())
    print(f"done: {state.step} steps in {time.time() - t0:.1f} s, best val IoU {state.best_val_iou:.4f}; "
          f"weights in {out / 'best.dseg'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, predictor: str = "model") -> int:
    from .trainer import evaluate, oracle_predictor, sim_predictor

    dataset = _require(cfg.dataset, "dataset", "--dataset")
    if predictor != "model":
        model = {"oracle": oracle_predictor, "sim": sim_predictor}[predictor]
        report_dir = _out_dir(cfg.out, required=False) or dataset
    else:
        ckpt = _require(cfg.checkpoint, "checkpoint", "--checkpoint")
        net = load_state_into(build(cfg.model_config(), seed=0), load_checkpoint(ckpt))
        model = net
        report_dir = _out_dir(cfg.out, required=False) or ckpt.parent
    videos = load_split(dataset, cfg.eval_split)
    report = evaluate(model, videos, with_smoke=cfg.smoke, seed=cfg.seed, threshold=cfg.binarize_threshold)
    table = report.format_table()
    print(table, end="")
    stem = f"eval_{cfg.eval_split}" + ("" if predictor == "model" else f"_{predictor}")
    with open(report_dir / f"{stem}.jsonl", "w") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (report_dir / f"{stem}.txt").write_text(table)
    if cfg.out is not None:
        cfg.save(report_dir / RUN_CONFIG_NAME)
    print(f"report written to {report_dir / (stem + '.jsonl')}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import run_all

    t0 = time.time()
    results = run_all(tol=cfg.tol, model_tol=cfg.model_tol, n_seeds=cfg.n_seeds)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max rel err {r.max_rel_error:.3e}  (tol {r.tol:.0e})  "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.time() - t0:.1f} s")
    out = _out_dir(cfg.out, required=False)
    if out is not None:
        cfg.save(out / RUN_CONFIG_NAME)
        (out / "gradcheck.jsonl").write_text("".join(
            json.dumps({"name": r.name, "max_rel_error": r.max_rel_error, "tol": r.tol, "passed": r.passed}) + "\n"
            for r in results))
    if failed:
        raise CommandError(EXIT_NUMERICS, "gradient check failed: " + ", ".join(
            f"{r.name} (max rel err {r.max_rel_error:.3e})" for r in failed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML key/value file")
    common.add_argument("--seed", type=int, help="run seed (data, init, minibatches, smoke)")
    common.add_argument("--out", help="output directory (its parent must exist)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualseg", description="Dual-input surgical tool segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset", help="dataset root")
    p.add_argument("--single-input", action="store_true", help="ignore the simulation mask (baseline)")
    p.add_argument("--resume", help="training output directory to continue from")
    p.add_argument("--max-steps", type=int, help="steps to run (added to the resumed step)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--dataset", help="dataset root")
    p.add_argument("--checkpoint", help="weights file (.dseg)")
    p.add_argument("--split", dest="eval_split", choices=["train", "val", "test"])
    p.add_argument("--smoke", action="store_true", default=None, help="also score smoke-corrupted frames")
    p.add_argument("--single-input", action="store_true", help="checkpoint is a single-input model")
    p.add_argument("--predictor", choices=["model", "oracle", "sim"], default="model",
                   help="model: the checkpoint; oracle: ground truth itself; sim: raw simulation mask")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, help="op tolerance (default 1e-4)")
    p.add_argument("--model-tol", type=float, help="end-to-end tolerance (default 1e-3)")
    p.add_argument("--seeds", dest="n_seeds", type=int, help="number of seeds (default 10)")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = ("seed", "out", "dataset", "checkpoint", "eval_split", "smoke", "tol", "model_tol", "n_seeds", "max_steps")
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "single_input", False):
        out["dual_input"] = False
    return out


def _base_for_eval(args: argparse.Namespace) -> dict:
    # model settings recorded next to the checkpoint by `train`
    if args.command != "eval" or not args.checkpoint:
        return {}
    recorded = Path(args.checkpoint).parent / RUN_CONFIG_NAME
    if not recorded.exists():
        return {}
    values = read_config_file(recorded)
    keep = ("width_factor", "dual_input", "frame_height", "frame_width", "binarize_threshold")
    return {k: values[k] for k in keep if k in values}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config, _overrides(args), base=_base_for_eval(args))
        if args.command == "datagen":
            return cmd_datagen(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, predictor=args.predictor)
        return cmd_gradcheck(cfg)
    except CommandError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except DatasetError as exc:
        code, msg = EXIT_DATA, f"dataset error: {exc.path}: {exc.reason}"
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, f"checkpoint error: {exc}"
    except OSError as exc:
        code, msg = EXIT_CONFIG, f"I/O error: {exc.filename or ''} {exc.strerror or exc}".strip()
    print(f"dualseg {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
