"""Command-line entry point: ``unetdr <verb> [options]``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Options may also come from ``--config FILE`` (``key = value`` lines whose keys
are the long flag names); explicit flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .architecture import (
    VARIANTS,
    CheckpointError,
    NetworkConfig,
    build_dilated_bottleneck,
    count_parameters,
    load_model,
    parameter_table,
    receptive_field_probe,
    save_model,
    Model,
)
from .dataset import DATA_ROOT_ENV, list_cases, load_cases, read_case_volumes, resolve, write_case
from .gradcheck import TOLERANCE, run_gradcheck
from .layers import Conv3d
from .losses import MetricsReport
from .nrrd import NrrdError, read_volume, write_volume
from .phantom import generate_phantom
from .preprocess import DEFAULT_CROP, DEFAULT_TARGET, ClaheParams, PreprocessConfig, normalize_volume, preprocess_case
from .split import make_split, read_manifest, write_manifest
from .training import TrainConfig, TrainingDivergedError, cross_validate, results_table, train_fold
from .volume import Volume

log = logging.getLogger("unetdr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _triple(text: str) -> tuple[int, int, int] | None:
    if text.lower() == "none":
        return None
    parts = [p for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W or 'none', got {text!r}")
    return tuple(int(p) for p in parts)


def _pair(text: str) -> tuple[int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value file; keys are long flag names")
    p.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _network_flags(p: argparse.ArgumentParser, variant_choices=VARIANTS, default_variant="unet_dr") -> None:
    p.add_argument("--variant", choices=variant_choices, default=default_variant,
                   help=f"architecture (default {default_variant})")
    p.add_argument("--base-channels", type=_positive_int, default=24, help="first-level width F (default 24)")
    p.add_argument("--dilation-rates", type=_int_list, default=[1, 2, 3, 4],
                   help="comma-separated bottleneck rates (default 1,2,3,4)")


def _training_flags(p: argparse.ArgumentParser, allow_both: bool = False) -> None:
    p.add_argument("--data", help="directory of <id>_image.nrrd / <id>_mask.nrrd pairs (required)")
    p.add_argument("--split", help="split manifest written by the split verb (required)")
    p.add_argument("--out", help="output directory for logs and checkpoints (required)")
    p.add_argument("--epochs", type=_positive_int, default=30, help="training epochs (default 30)")
    p.add_argument("--batch-size", type=_positive_int, default=1, help="cases per step (default 1)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 0.001)")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="write epoch_XXXX.ckpt every N epochs; 0 disables (default 0)")
    p.add_argument("--patience", type=int, default=None,
                   help="stop after N epochs without validation improvement (default off)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="arithmetic width (default float32)")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")
    _network_flags(p, VARIANTS + ("both",) if allow_both else VARIANTS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unetdr", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog=f"Relative paths are resolved under ${DATA_ROOT_ENV} when it is set.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    p = sub.add_parser("preprocess", help="CLAHE, normalize, crop and resample a case directory")
    _common(p)
    p.add_argument("--in", dest="input", help="input case directory (required)")
    p.add_argument("--out", help="output case directory (required)")
    p.add_argument("--tiles", type=_pair, default=(8, 8), help="CLAHE tile grid rows,cols (default 8,8)")
    p.add_argument("--clip-limit", type=float, default=2.0, help="CLAHE clip limit (default 2.0)")
    p.add_argument("--bins", type=_positive_int, default=256, help="CLAHE histogram bins (default 256)")
    p.add_argument("--crop", type=_triple, default=DEFAULT_CROP,
                   help="centre crop D,H,W or 'none' (default %s)" % ",".join(map(str, DEFAULT_CROP)))
    p.add_argument("--resample", type=_triple, default=DEFAULT_TARGET,
                   help="resample target D,H,W or 'none' (default %s)" % ",".join(map(str, DEFAULT_TARGET)))
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel worker processes (default 1)")

    p = sub.add_parser("phantom", help="generate seeded synthetic cases")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=8, help="number of cases (default 8)")
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--extents", type=_triple, default=(32, 32, 32), help="D,H,W (default 32,32,32)")
    p.add_argument("--raw", action="store_true", help="skip min-max normalization of the images")

    p = sub.add_parser("split", help="write a test / k-fold split manifest")
    _common(p)
    p.add_argument("--data", help="case directory to split (required)")
    p.add_argument("--out", help="manifest path (required)")
    p.add_argument("--k", type=_positive_int, default=5, help="number of folds (default 5)")
    p.add_argument("--test-fraction", type=float, default=0.2, help="held-out share (default 0.2)")

    p = sub.add_parser("train", help="train one fold of a split")
    _common(p)
    _training_flags(p)
    p.add_argument("--fold", type=int, default=0, help="fold used for validation (default 0)")
    p.add_argument("--resume", help="epoch checkpoint to continue from")

    p = sub.add_parser("cv", help="k-fold cross-validation plus held-out test scoring")
    _common(p)
    _training_flags(p, allow_both=True)

    p = sub.add_parser("evaluate", help="score a checkpoint on cases with masks")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint (required)")
    p.add_argument("--data", help="case directory (required)")
    p.add_argument("--split", help="manifest; restricts scoring to its test ids")
    p.add_argument("--out", help="write the metrics table here instead of stdout")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel worker processes (default 1)")

    p = sub.add_parser("predict", help="segment one volume")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint (required)")
    p.add_argument("--image", help="input NRRD volume (required)")
    p.add_argument("--out", help="output mask NRRD (required)")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold (default 0.5)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    _common(p)
    p.add_argument("--tol", type=float, default=TOLERANCE, help=f"max relative error (default {TOLERANCE:g})")

    p = sub.add_parser("rfprobe", help="measure receptive fields by single-voxel perturbation")
    _common(p)

    p = sub.add_parser("paramcount", help="per-layer and total trainable parameter counts")
    _common(p)
    _network_flags(p, VARIANTS + ("both",), "both")
    p.add_argument("--per-layer", action="store_true", help="also print every layer's count")
    return parser


REQUIRED = {
    "preprocess": ("input", "out"),
    "phantom": ("out",),
    "split": ("data", "out"),
    "train": ("data", "split", "out"),
    "cv": ("data", "split", "out"),
    "evaluate": ("checkpoint", "data"),
    "predict": ("checkpoint", "image", "out"),
}


def _config_value(action: argparse.Action, raw: str, key: str, path):
    if action.nargs == 0:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{path}: key {key!r} expects true/false, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        value = action.type(raw) if action.type else raw
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UsageError(f"{path}: key {key!r}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"{path}: key {key!r} must be one of {list(action.choices)}, got {raw!r}")
    return value


def _subparser(parser: argparse.ArgumentParser, verb: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[verb]
    raise AssertionError("no subparsers")


def parse_args(argv) -> argparse.Namespace:
    """defaults < config file < flags"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        from .preprocess import read_key_values

        path = resolve(args.config)
        try:
            kv = read_key_values(path)
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        sub = _subparser(parser, args.verb)
        by_flag = {}
        for a in sub._actions:
            for opt in a.option_strings:
                if opt.startswith("--"):
                    by_flag[opt[2:]] = a
        updates = {}
        for key, raw in kv.items():
            action = by_flag.get(key.replace("_", "-"))
            if action is None or action.dest in ("help", "config"):
                raise UsageError(f"{path}: unknown key {key!r} for verb {args.verb!r}")
            updates[action.dest] = _config_value(action, raw, key, path)
        sub.set_defaults(**updates)
        args = parser.parse_args(argv)
    for dest in REQUIRED.get(args.verb, ()):
        if getattr(args, dest) is None:
            flag = "--in" if dest == "input" else "--" + dest.replace("_", "-")
            raise UsageError(f"unetdr {args.verb}: {flag} is required (flag or config key)")
    return args


# verbs


def _preprocess_one(job):
    src, dst, cid, cfg = job
    img, mask = read_case_volumes(src, cid)
    img, mask = preprocess_case(img, mask, cfg)
    write_case(dst, cid, img, mask)
    return cid, img.extents


def _map(fn, jobs, n_workers):
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_preprocess(args) -> int:
    src, dst = resolve(args.input), resolve(args.out)
    cfg = PreprocessConfig(ClaheParams(args.tiles, args.clip_limit, args.bins), args.crop, args.resample)
    ids = list_cases(src)
    if not ids:
        raise FileNotFoundError(f"{src}: no *_image.nrrd files")
    for cid, ext in _map(_preprocess_one, [(src, dst, cid, cfg) for cid in ids], args.jobs):
        print(f"{cid}\t{'x'.join(map(str, ext))}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    out = resolve(args.out)
    for i in range(args.n):
        img, mask = generate_phantom(np.random.default_rng([args.seed, i]).integers(2**63), args.extents)
        if not args.raw:
            img = normalize_volume(img)
        cid = f"phantom{i:03d}"
        write_case(out, cid, img, mask)
        print(f"{cid}\tforeground {mask.data.mean():.4f}")
    return EXIT_OK


def cmd_split(args) -> int:
    ids = list_cases(resolve(args.data))
    split = make_split(ids, args.test_fraction, args.k, args.seed)
    write_manifest(resolve(args.out), split)
    sizes = "/".join(str(len(f)) for f in split.folds)
    print(f"test {len(split.test_ids)}  folds {sizes}  train-per-fold {len(split.train_ids(0))}")
    return EXIT_OK


def _configs(args, variant: str) -> tuple[NetworkConfig, TrainConfig]:
    net = NetworkConfig(base_channels=args.base_channels, dilation_rates=list(args.dilation_rates),
                        variant=variant, seed=args.seed)
    train = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, lr=args.lr,
                        checkpoint_every=args.checkpoint_every, patience=args.patience, dtype=args.dtype,
                        threshold=args.threshold)
    return net, train


def _load_split(args):
    data = resolve(args.data)
    split = read_manifest(resolve(args.split))
    cases = load_cases(data, split.all_ids())
    unlabeled = [c for c, v in cases.items() if v.mask is None]
    if unlabeled:
        raise FileNotFoundError(f"{data}: missing mask files for {unlabeled[:5]}")
    return split, cases


def cmd_train(args) -> int:
    split, cases = _load_split(args)
    if not 0 <= args.fold < split.k:
        raise UsageError(f"--fold must lie in [0, {split.k - 1}], got {args.fold}")
    net, train = _configs(args, args.variant)
    # same seeding rule as one fold of cv
    net = replace(net, seed=net.seed + args.fold)
    train = replace(train, seed=train.seed + args.fold)
    out = resolve(args.out)
    model = Model(net, dtype=train.np_dtype)
    tr = [cases[c] for c in split.train_ids(args.fold)]
    va = [cases[c] for c in split.val_ids(args.fold)]
    model, tlog = train_fold(model, tr, va, train, out, resolve(args.resume) if args.resume else None)
    (out / "log.tsv").write_text(tlog.to_text())
    save_model(out / "final.ckpt", model)
    print(tlog.to_text(), end="")
    print(f"best epoch {tlog.best_epoch}")
    return EXIT_OK


def cmd_cv(args) -> int:
    split, cases = _load_split(args)
    variants = VARIANTS if args.variant == "both" else (args.variant,)
    out = resolve(args.out)
    results = []
    for variant in variants:
        net, train = _configs(args, variant)
        results.append(cross_validate(cases, split, net, train, out / variant if len(variants) > 1 else out))
    table = results_table(results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


def _evaluate_one(job):
    ckpt, data, cid, threshold = job
    model, _ = load_model(ckpt)
    img, mask = read_case_volumes(data, cid)
    if mask is None:
        raise FileNotFoundError(f"{data}: no mask for case {cid}")
    return cid, mask.data, model.predict(img.data)


def cmd_evaluate(args) -> int:
    ckpt, data = resolve(args.checkpoint), resolve(args.data)
    load_model(ckpt)  # fail early on a bad checkpoint
    ids = read_manifest(resolve(args.split)).test_ids if args.split else list_cases(data)
    report = MetricsReport()
    for cid, y, p in _map(_evaluate_one, [(ckpt, data, cid, args.threshold) for cid in ids], args.jobs):
        report.add(cid, y, p, args.threshold)
    text = report.to_text()
    if args.out:
        resolve(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_model(resolve(args.checkpoint))
    img = read_volume(resolve(args.image))
    prob = model.predict(img.data)
    mask = Volume((prob >= args.threshold).astype(np.uint8), img.spacing, "mask")
    write_volume(resolve(args.out), mask, "uchar")
    print(f"{args.out}\tforeground {mask.data.mean():.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed, args.tol)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_rfprobe(args) -> int:
    rng = np.random.default_rng(args.seed)
    ext = (15, 15, 15)
    for d in (1, 2, 3, 4):
        conv = Conv3d(1, 1, dilation=d, rng=rng)
        e = receptive_field_probe(conv, ext)
        print(f"conv3d k=3 d={d}\t{'x'.join(map(str, e))}")
    rates = [1, 2, 3, 4]
    block = build_dilated_bottleneck(1, 2, rates, rng)
    block.eval()
    e = receptive_field_probe(block, ext)
    print(f"summed bottleneck d={','.join(map(str, rates))}\t{'x'.join(map(str, e))}")
    return EXIT_OK


def cmd_paramcount(args) -> int:
    variants = VARIANTS if args.variant == "both" else (args.variant,)
    for variant in variants:
        model = Model(NetworkConfig(base_channels=args.base_channels, dilation_rates=list(args.dilation_rates),
                                    variant=variant, seed=args.seed))
        if args.per_layer:
            for name, n in parameter_table(model):
                print(f"{variant}\t{name}\t{n}")
        print(f"{variant}\ttotal\t{count_parameters(model)}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "phantom": cmd_phantom,
    "split": cmd_split,
    "train": cmd_train,
    "cv": cmd_cv,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "rfprobe": cmd_rfprobe,
    "paramcount": cmd_paramcount,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.verb](args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError) as exc:
        where = f" (last good weights: {exc.checkpoint})" if getattr(exc, "checkpoint", None) else ""
        print(f"numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NrrdError, CheckpointError, OSError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
