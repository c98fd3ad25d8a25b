"""Command-line surface: dataset generation, splitting, training, evaluation,
prediction, metric reports, the menet-vs-baseline ablation, and gradient checks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as G
from . import model as M
from . import train as TR
from .data import DataError
from .train import NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_SEEDS = (0, 1, 2)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here reserves 2 for
    data errors, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str):
    print(msg, flush=True)


def _load_train_config(path) -> TR.TrainConfig:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise DataError(f"config {path} must be a JSON object")
    try:
        return TR.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config {path}: {exc}") from exc


def _parse_ratio(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"ratio must look like 8:1:1, got {text!r}")
    try:
        ratio = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"ratio must be three integers, got {text!r}") from None
    if any(r <= 0 for r in ratio):
        raise argparse.ArgumentTypeError(f"ratio parts must be positive, got {text!r}")
    return ratio


def _metric_line(name: str, value, unit: str = "") -> str:
    if value is None:
        return f"{name:>5}  undefined"
    return f"{name:>5}  {value:.6f}{unit}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    ids = D.gen_dataset(args.out, n_cases=args.cases, size=args.size, seed=args.seed)
    _say(f"wrote {len(ids)} cases of {args.size}^3 to {args.out} (seed {args.seed})")
    return EXIT_OK


def _cmd_split(args) -> int:
    ids = D.list_cases(args.data)
    if not ids:
        raise DataError(f"no cases found under {args.data}")
    spec = D.split_cases(ids, seed=args.seed, ratio=args.ratio)
    path = Path(args.data) / "split.json"
    D.save_split(spec, path)
    _say(f"split {len(ids)} cases -> {len(spec.train)}/{len(spec.val)}/{len(spec.test)}"
         f" (train/val/test), wrote {path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    record, _ = TR.train(cfg, args.data, out_dir=args.out, log=_say)
    _say(f"best val dsc {record.best_val_dsc:.4f} at epoch {record.best_epoch + 1}; "
         f"wrote {Path(args.out) / 'checkpoint.mnck'} and {Path(args.out) / 'record.json'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    result = TR.evaluate_checkpoint(args.checkpoint, args.data, args.split,
                                    threshold=args.threshold, oracle=args.oracle)
    for metric in ("dsc", "ravd", "hd", "assd"):
        mean, std = result["mean"][metric], result["std"][metric]
        undef = result["undefined_counts"][metric]
        note = f"  ({undef} undefined)" if undef else ""
        if mean is None:
            _say(f"{metric:>5}  undefined in all {result['n_cases']} cases")
        else:
            _say(f"{metric:>5}  {mean:.4f} +/- {std:.4f}{note}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(result, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8")
        _say(f"wrote {args.out}")
    return EXIT_OK


def _read_case_dir(case_dir: Path) -> D.Case:
    t1w = D.read_mvol(case_dir / "t1w.mvol")
    fa = D.read_mvol(case_dir / "fa.mvol")
    label_path = case_dir / "label.mvol"
    if label_path.exists():
        label = D.read_mvol(label_path)
    else:
        label = D.Volume(np.zeros_like(t1w.voxels, dtype=np.uint8), t1w.spacing)
    return D.Case(id=case_dir.name, t1w=t1w, fa=fa, label=label)


def _cmd_predict(args) -> int:
    params = M.load_checkpoint(args.checkpoint)
    case = _read_case_dir(Path(args.case))
    mask = M.predict_volume(params, case, threshold=args.threshold)
    D.write_mvol(mask, args.out)
    _say(f"wrote {args.out} ({mask.foreground_count} foreground voxels)")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from . import metrics as ME
    pred = D.read_mvol(args.pred)
    gt = D.read_mvol(args.gt)
    if pred.voxels.shape != gt.voxels.shape:
        raise DataError(f"shape mismatch: {args.pred} is {pred.extents}, "
                        f"{args.gt} is {gt.extents}")
    if pred.spacing != gt.spacing:
        raise DataError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    rep = ME.report(pred.voxels, gt.voxels, gt.spacing)
    values = rep.values()
    _say(_metric_line("dsc", values["dsc"]))
    _say(_metric_line("ravd", values["ravd"], " %"))
    _say(_metric_line("hd", values["hd"], " mm"))
    _say(_metric_line("assd", values["assd"], " mm"))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_train_config(args.config)
    seeds = tuple(range(args.seeds))
    result = TR.ablate(cfg, args.data, seeds, out_dir=args.out, log=_say)
    _say(TR.ablation_table(result))
    if args.out:
        _say(f"wrote {Path(args.out) / 'ablation.json'} and {Path(args.out) / 'ablation.csv'}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    worst_overall = 0.0
    if args.op:
        if args.op not in G.REGISTRY:
            raise DataError(f"unknown op {args.op!r}; "
                            f"registered: {', '.join(sorted(G.REGISTRY))}")
        names = [args.op]
    else:
        names = sorted(G.REGISTRY)
    for name in names:
        worst = max(G.grad_check(name, seed=s) for s in GRADCHECK_SEEDS)
        worst_overall = max(worst_overall, worst)
        _say(f"{name:<16} max relative error {worst:.3e}")
    if not args.op:
        worst = max(G.model_check(seed=s) for s in GRADCHECK_SEEDS)
        worst_overall = max(worst_overall, worst)
        _say(f"{'whole-net':<16} max relative error {worst:.3e}")
    if worst_overall >= GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: worst relative error "
                           f"{worst_overall:.3e} >= {GRADCHECK_TOLERANCE}")
    _say(f"all gradient checks below {GRADCHECK_TOLERANCE}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="menet",
                     description="Multi-modal exchange network segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--cases", type=int, default=40, help="number of cases (default 40)")
    p.add_argument("--size", type=int, default=64, help="cubic extent per case (default 64)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("split", help="write train/val/test split.json for a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ratio", type=_parse_ratio, default=(8, 1, 1),
                   help="train:val:test ratio (default 8:1:1)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    p.set_defaults(fn=_cmd_split)

    p = sub.add_parser("train", help="train a model on a split dataset")
    p.add_argument("--config", required=True, help="JSON file of training settings")
    p.add_argument("--data", required=True, help="dataset directory with split.json")
    p.add_argument("--out", required=True, help="run directory for checkpoint and record")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory with split.json")
    p.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="split to evaluate (default test)")
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="foreground probability threshold (default 0.5)")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (harness self-check)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one case directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--case", required=True,
                   help="case directory containing t1w.mvol and fa.mvol")
    p.add_argument("--out", required=True, help="output mask path (.mvol)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="foreground probability threshold (default 0.5)")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("metrics", help="compare a predicted mask against ground truth")
    p.add_argument("--pred", required=True, help="predicted mask (.mvol)")
    p.add_argument("--gt", required=True, help="ground-truth mask (.mvol)")
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("ablate", help="train menet and baseline variants, compare")
    p.add_argument("--config", required=True, help="JSON file of training settings")
    p.add_argument("--data", required=True, help="dataset directory with split.json")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (default 3)")
    p.add_argument("--out", default=None, help="optional output directory for the table")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--op", default=None, help="check a single registered op by name")
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"menet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"menet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
