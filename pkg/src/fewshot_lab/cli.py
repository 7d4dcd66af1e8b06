"""Command-line surface.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``data verify``,
``data prepare``, ``data synth``, ``report``. Exit codes: 0 success,
1 contract/validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import FewshotError
from .harness import (
    TrainConfig,
    evaluate_checkpoint,
    load_config,
    serialize_config,
    train,
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="fewshot-lab",
                     description="Episodic few-shot training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[], help="run the training loop")
    p_train.add_argument("--config", required=True, help="flat key=value config file")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out", help="override the output directory")
    p_train.add_argument("--root", help="override the dataset root")
    p_train.add_argument("--no-figures", action="store_true",
                         help="skip rendering training-curve figures")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on fresh episodes")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--n-way", type=int, required=True)
    p_eval.add_argument("--k-shot", type=int, required=True)
    p_eval.add_argument("--episodes", type=int, required=True)
    p_eval.add_argument("--queries", type=int, default=1)
    p_eval.add_argument("--split", default="test", choices=("train", "test"))
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--root", help="override the dataset root")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p_grad.add_argument("--instances", type=int, default=5,
                        help="random instances per check")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)

    p_verify = data_sub.add_parser("verify", help="ingest a tree and report counts")
    p_verify.add_argument("--root", required=True)
    p_verify.add_argument("--expect-classes", type=int,
                          help="fail unless the class count matches")
    p_verify.add_argument("--expect-alphabets", type=int,
                          help="fail unless the alphabet count matches")
    p_verify.set_defaults(func=cmd_data_verify)

    p_prepare = data_sub.add_parser("prepare", help="preprocess and cache tensors")
    p_prepare.add_argument("--root", required=True)
    p_prepare.add_argument("--out", required=True, help="cache container path")
    p_prepare.set_defaults(func=cmd_data_prepare)

    p_synth = data_sub.add_parser("synth", help="generate a synthetic dataset tree")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--alphabets", type=int, default=3)
    p_synth.add_argument("--chars", type=int, default=12)
    p_synth.add_argument("--exemplars", type=int, default=20)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_data_synth)

    p_report = sub.add_parser("report", help="render figures from a metrics CSV")
    p_report.add_argument("--metrics", required=True)
    p_report.add_argument("--out", help="figure directory (default: alongside the CSV)")
    p_report.set_defaults(func=cmd_report)

    p_config = sub.add_parser("config", help="print a default config file")
    p_config.set_defaults(func=cmd_config)
    return parser


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    result = train(cfg, resume=args.resume, root_override=args.root,
                   figures=not args.no_figures, log=print)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    for path in result.figure_paths:
        print(f"figure:     {path}")
    return 0


def cmd_eval(args):
    row = evaluate_checkpoint(
        args.checkpoint, n_way=args.n_way, k_shot=args.k_shot,
        episodes=args.episodes, seed=args.seed, queries=args.queries,
        split=args.split, root_override=args.root)
    from .harness import METRICS_HEADER

    print(METRICS_HEADER)
    print(row.to_csv())
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite, suite_passed

    results = run_suite(instances=args.instances, log=print)
    ok = suite_passed(results)
    worst = max(results, key=lambda r: r.max_rel_err / r.tolerance)
    print(f"{'OK' if ok else 'FAILED'}: {len(results)} checks, "
          f"worst {worst.name} at {worst.max_rel_err:.3e}")
    return 0 if ok else 1


def cmd_data_verify(args):
    from .omniglot import ingest

    dataset = ingest(args.root)
    print(f"{dataset.n_classes} classes / {dataset.n_alphabets} alphabets")
    if args.expect_classes is not None and dataset.n_classes != args.expect_classes:
        print(f"error: expected {args.expect_classes} classes", file=sys.stderr)
        return 1
    if args.expect_alphabets is not None and dataset.n_alphabets != args.expect_alphabets:
        print(f"error: expected {args.expect_alphabets} alphabets", file=sys.stderr)
        return 1
    return 0


def cmd_data_prepare(args):
    from .cache import write_cache
    from .omniglot import ingest

    dataset = ingest(args.root)
    count = write_cache(args.out, dataset)
    print(f"cached {count} classes to {args.out}")
    return 0


def cmd_data_synth(args):
    from .synth import generate_glyph_tree

    count = generate_glyph_tree(args.out, n_alphabets=args.alphabets,
                                chars_per_alphabet=args.chars,
                                exemplars=args.exemplars, seed=args.seed)
    print(f"wrote {count} classes under {args.out}")
    return 0


def cmd_report(args):
    from .report import render_metrics_figures

    paths = render_metrics_figures(args.metrics, args.out)
    for path in paths:
        print(path)
    return 0


def cmd_config(args):
    print(serialize_config(TrainConfig()), end="")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return 0 if code in (0, None) else 1
    try:
        return args.func(args)
    except FewshotError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
