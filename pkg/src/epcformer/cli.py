"""Command-line entry point: gen | train | eval | infer.

Exit codes: 0 ok, 1 other failure, 2 usage, 3 missing file,
4 format version mismatch, 5 corrupt file, 6 checksum mismatch.
Failures print one JSON line on stderr: {"error": kind, "code": n, "message": text}.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError
from .data import DatasetError, generate_dataset, load_dataset, save_dataset
from .evaluate import MODALITIES, heldout_split, select_mask, predictions_from_output, evaluate
from .metrics import region_similarity
from .model import EPCFormer
from .training import TRAIN_MODES, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3
_KINDS = {1: "failure", 2: "usage", 3: "missing_file", 4: "version_mismatch", 5: "corrupt", 6: "checksum"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, message)


def _require(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, f"no such file: {path}")
    return p


def _config(path: str | None) -> Config:
    return Config() if path is None else Config.load(_require(path))


def cmd_gen(args) -> None:
    cfg = _config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    save_dataset(args.out, generate_dataset(cfg.data, seed))


def cmd_train(args) -> None:
    cfg = _config(args.config)
    if args.steps is not None:
        cfg = cfg.updated(steps=args.steps)
    if args.seed is not None:
        cfg = cfg.updated(seed=args.seed)
    dataset = load_dataset(_require(args.data))
    train_set, _ = heldout_split(dataset, cfg.heldout)
    model = EPCFormer(cfg)
    if args.log:
        with open(args.log, "w") as fh:
            train(model, train_set, mode=args.mode, log_stream=fh)
    else:
        train(model, train_set, mode=args.mode)
    save_checkpoint(args.out, model)


def cmd_eval(args) -> None:
    model = load_checkpoint(_require(args.ckpt))
    dataset = load_dataset(_require(args.data))
    _, heldout = heldout_split(dataset, model.config.heldout)
    report = evaluate(model, heldout, args.modality)
    Path(args.report).write_text(report.to_text())


def cmd_infer(args) -> None:
    model = load_checkpoint(_require(args.ckpt))
    dataset = load_dataset(_require(args.data))
    if not 0 <= args.sample < len(dataset):
        raise CliError(EXIT_USAGE, f"sample {args.sample} out of range [0, {len(dataset)})")
    sample = dataset[args.sample]
    if not 0 <= args.expr_id < len(sample.expressions):
        raise CliError(EXIT_USAGE, f"expression {args.expr_id} out of range [0, {len(sample.expressions)})")
    expr = sample.expressions[args.expr_id]
    t_count = sample.frames.shape[0]
    text = [expr.tokens if expr.modality == "text" else None] * t_count
    audio = [expr.tokens if expr.modality == "audio" else None] * t_count
    out = model.forward(sample.frames, text, audio)
    masks = np.stack([
        select_mask(predictions_from_output(out.mask_logits.data[t], out.boxes.data[t], out.ref_scores.data[t]),
                    model.config.nms_iou, model.config.score_threshold)
        for t in range(t_count)])
    with open(args.out_mask, "wb") as fh:
        np.save(fh, masks)
    j = float(np.mean([region_similarity(masks[t], sample.gt_masks[expr.object_id, t]) for t in range(t_count)]))
    print(json.dumps({"sample": args.sample, "expr_id": args.expr_id, "modality": expr.modality,
                      "object_id": expr.object_id, "J": round(j, 6)}))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epcformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=sorted(TRAIN_MODES), default="mix")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="write per-step JSON lines here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modality", choices=MODALITIES, required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one sample for one expression")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--expr-id", type=int, required=True)
    p.add_argument("--out-mask", required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def _fail(code: int, message: str) -> int:
    line = json.dumps({"error": _KINDS.get(code, "failure"), "code": code, "message": message})
    print(line, file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except (DatasetError, CheckpointError) as exc:
        return _fail(exc.code, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, f"config: {exc}")
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_FAIL, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
