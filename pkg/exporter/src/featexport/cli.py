"""Command line for the feature exporter.

    featexport export --dataset cinic10 --root images/ --split train \
        --subset 0.1 --weights w.npz --out d/train
    featexport init-weights --seed 7 --classes 10 --out w.npz

`export` writes one split directory in the training package's dataset
format. `init-weights` saves a random-initialized stand-in weight bundle for
format and pipeline testing; it is not a trained model. Exit codes: 0
success, 1 bad arguments or validation failure, 2 unreadable input.
"""

import argparse
import sys

from . import export, images, resnet


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featexport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("export", help="run the backbone over an image tree "
                       "and write one dataset split")
    p.add_argument("--dataset", default="cinic10",
                   help="dataset name recorded in provenance")
    p.add_argument("--root", required=True,
                   help="image tree root containing split directories")
    p.add_argument("--split", required=True,
                   choices=sorted(images.SPLIT_DIRS),
                   help="which split to export")
    p.add_argument("--weights", required=True,
                   help="backbone weight bundle (.npz)")
    p.add_argument("--out", required=True, help="output split directory")
    p.add_argument("--subset", type=float, default=1.0,
                   help="per-class fraction of the split to keep, in (0, 1]")
    p.add_argument("--batch", type=int, default=32,
                   help="forward-pass batch size")
    p.add_argument("--no-logits", action="store_true",
                   help="omit the backbone logits table")

    p = sub.add_parser("init-weights", help="save a random stand-in weight "
                       "bundle (structurally valid, untrained)")
    p.add_argument("--seed", type=int, default=42, help="init seed")
    p.add_argument("--classes", type=int, default=10,
                   help="classifier width")
    p.add_argument("--out", required=True, help="output .npz path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "export":
            spec = export.ExportSpec(
                dataset=args.dataset, root=args.root, split=args.split,
                weights=args.weights, out=args.out, subset=args.subset,
                store_logits=not args.no_logits, batch_size=args.batch)
            summary = export.export_split(spec)
            print(f"exported {summary['num_samples']} samples, "
                  f"{summary['num_classes']} classes -> {summary['out']}")
            for level, d, h, w in summary["levels"]:
                print(f"  level {level}: {d}x{h}x{w}")
        elif args.command == "init-weights":
            if args.classes < 2:
                raise images.TreeError("--classes must be >= 2")
            resnet.save_weights(
                resnet.random_weights(args.seed, args.classes), args.out)
            print(f"wrote stand-in weights to {args.out}")
    except images.TreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except resnet.WeightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
