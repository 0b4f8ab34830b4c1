"""Command line entry point: ``mmcoding bench | fit | predict``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace

from . import evaluation
from .data import FORMATS, load_dataset
from .errors import MMCodingError
from .pipelines import METHODS, MethodSpec, fit, load_model, predict, save_model


def _label_spec(value: str):
    """``6`` -> last 6 columns; ``a,b,c`` -> names; anything ending in .xml -> MULAN file."""
    if value is None:
        return None
    if value.isdigit():
        return int(value)
    if value.lower().endswith(".xml"):
        return value
    return [v.strip() for v in value.split(",") if v.strip()]


def _add_data_args(p, required_labels=True):
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--format", default="arff", choices=FORMATS)
    p.add_argument("--labels", required=required_labels,
                   help="label count (last k columns), comma-separated names, or MULAN .xml file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmcoding", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run the repeated random-split benchmark")
    b.add_argument("--config", required=True, help="TOML benchmark config")
    b.add_argument("--runs", type=int)
    b.add_argument("--n-train", type=int)
    b.add_argument("--seed", type=int, help="master seed")
    b.add_argument("--threads", type=int)
    b.add_argument("--out", help="output directory (overrides the config)")

    f = sub.add_parser("fit", help="fit one method and save the model")
    f.add_argument("--method", required=True, choices=METHODS + ("CodingPCA-R",))
    _add_data_args(f)
    f.add_argument("--out", required=True, help="model file (.npz)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--d", type=int, help="number of projections")
    f.add_argument("--C", type=float, default=1e6)
    f.add_argument("--lambda-decode", type=float, default=1.0)
    f.add_argument("--decoder", choices=("exhaustive", "meanfield"), default="exhaustive")
    f.add_argument("--top-labels", type=int)
    f.add_argument("--threads", type=int, default=1, help="accepted for symmetry; fitting is serial")

    p = sub.add_parser("predict", help="predict label vectors with a saved model")
    p.add_argument("--model", required=True)
    _add_data_args(p, required_labels=False)
    p.add_argument("--out", required=True, help="output CSV, one row of 0/1 labels per input")
    return ap


def _cmd_bench(args) -> int:
    cfg = evaluation.load_config(args.config)
    overrides = {k: v for k, v in dict(runs=args.runs, n_train=args.n_train,
                                       master_seed=args.seed, threads=args.threads,
                                       output_dir=args.out).items() if v is not None}
    cfg = replace(cfg, **overrides)
    report = evaluation.run_benchmark(cfg)
    md = evaluation.render_markdown(report)
    if cfg.output_dir:
        raw_path, md_path = evaluation.write_outputs(report, cfg.output_dir)
        print(f"wrote {raw_path} and {md_path}", file=sys.stderr)
    print(md)
    return 1 if report.failures else 0


def _cmd_fit(args) -> int:
    from .data import select_top_labels
    d = load_dataset(args.data, args.format, _label_spec(args.labels))
    if args.top_labels:
        d = select_top_labels(d, args.top_labels)
    spec = MethodSpec(kind=args.method, d=args.d, C=args.C, lambda_decode=args.lambda_decode,
                      seed=args.seed, decoder=args.decoder)
    model = fit(spec, d)
    save_model(model, args.out)
    print(f"{spec.kind}: {model.n_base_models} base models, saved to {args.out}", file=sys.stderr)
    return 0


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    labels = _label_spec(args.labels)
    if labels is None:
        labels = list(model.label_names)
    d = load_dataset(args.data, args.format, labels)
    Y = predict(model, d.features)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(model.label_names)
        w.writerows(Y.tolist())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"bench": _cmd_bench, "fit": _cmd_fit, "predict": _cmd_predict}[args.command]
    try:
        return handler(args)
    except (MMCodingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
