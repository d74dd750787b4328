"""``unipar`` command line: gen-data, train, eval, gradcheck.

Every failure exits nonzero after printing one line ``error[CODE]: message``
to stderr, where CODE is the error class's ``code`` attribute.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time

from unipar import gradcheck_suite, pipeline
from unipar.config import apply_env_overrides, load_config
from unipar.data import Split
from unipar.errors import ConfigurationError, UniparError

DEFAULT_CONFIG = "configs/toy.yaml"

_OS_CODES = {FileExistsError: "EXISTS", FileNotFoundError: "NOTFOUND", PermissionError: "PERMISSION"}


def _split_ids(value: str) -> list:
    ids = [v.strip() for v in value.split(",") if v.strip()]
    if not ids:
        raise argparse.ArgumentTypeError("expected a comma-separated list of dataset ids")
    return ids


def _config(args):
    cfg = apply_env_overrides(load_config(args.config))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "datasets", None):
        cfg = cfg.subset(args.datasets)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    for dataset_id, ds in pipeline.generate_all(cfg, force=args.force).items():
        rates = " ".join(f"{r:.3f}" for r in ds.spec.positive_rates)
        print(f"{dataset_id}\t{ds.spec.modality.value}\ttrain={len(ds.split(Split.TRAIN))}"
              f"\tval={len(ds.split(Split.VAL))}\tpositive_rates={rates}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.epochs = args.epochs
        cfg.warmup_epochs = min(cfg.warmup_epochs, cfg.epochs)
        cfg.validate()
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    if not cfg.desk_runnable and not args.force:
        raise ConfigurationError(f"{args.config} is marked desk_runnable: false; pass --force to run it anyway")
    started = time.perf_counter()

    def report(epoch, rows):
        for row in rows:
            print("\t".join(row), flush=True)

    print("\t".join(pipeline.LOG_COLUMNS))
    pipeline.train(cfg, log_path=cfg.log_path, checkpoint_path=cfg.checkpoint, on_epoch=report)
    print(f"# checkpoint {cfg.checkpoint}, log {cfg.log_path}, {time.perf_counter() - started:.1f}s",
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg_path = args.checkpoint
    if cfg_path is None:
        cfg_path = apply_env_overrides(load_config(args.config)).checkpoint
    split = Split.TRAIN if args.split == "train" else Split.VAL
    reports = pipeline.evaluate_checkpoint(cfg_path, args.datasets, split=split)
    for report in reports.values():
        if args.format == "machine":
            print("\n".join(report.format_machine()))
        else:
            print(report.format_block())
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite.run(args.component or None, seed=args.seed if args.seed is not None else 605)
    if args.format == "machine":
        for r in results:
            print(f"{r.component}\t{r.max_rel_error!r}\t{'pass' if r.passed else 'FAIL'}")
    else:
        print(f"{'component':<14} {'max rel err':>12}  {'worst parameter':<22} {'time':>6}  result")
        for r in results:
            print(f"{r.component:<14} {r.max_rel_error:>12.3e}  {r.worst_parameter:<22} {r.seconds:>5.1f}s  "
                  f"{'pass' if r.passed else 'FAIL'}")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"error[GRADCHECK]: relative error above {gradcheck_suite.TOLERANCE:g} in {', '.join(failed)}",
              file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unipar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, datasets=True):
        p.add_argument("--config", default=DEFAULT_CONFIG, help=f"run config (default {DEFAULT_CONFIG})")
        p.add_argument("--seed", type=int, help="override the config seed (env UNIPAR_SEED)")
        if datasets:
            p.add_argument("--datasets", type=_split_ids, help="comma-separated subset of dataset ids")

    p = sub.add_parser("gen-data", help="generate the synthetic datasets of a config")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite existing dataset files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="joint training with per-epoch rotational evaluation")
    common(p)
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--checkpoint", help="checkpoint path (env UNIPAR_CHECKPOINT)")
    p.add_argument("--force", action="store_true", help="run configs marked desk_runnable: false")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, one report per dataset")
    p.add_argument("--config", default=DEFAULT_CONFIG, help="used only to locate the default checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path (env UNIPAR_CHECKPOINT, else the config's)")
    p.add_argument("--datasets", type=_split_ids, help="comma-separated subset of dataset ids")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--format", choices=("text", "machine"), default="text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks at toy dims (float64)")
    p.add_argument("--component", action="append", choices=list(gradcheck_suite.COMPONENTS),
                   help="check only this component (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("text", "machine"), default="text")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def error_code(exc: BaseException) -> str:
    if isinstance(exc, UniparError):
        return exc.code
    for kind, code in _OS_CODES.items():
        if isinstance(exc, kind):
            return code
    return "OS" if isinstance(exc, OSError) else "INTERNAL"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error[INTERRUPTED]: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one greppable line
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error[{error_code(exc)}]: {message}", file=sys.stderr)
        if args.verbose:
            logging.getLogger("unipar").exception("traceback")
        return 1


if __name__ == "__main__":
    sys.exit(main())
