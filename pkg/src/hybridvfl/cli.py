"""Command line entry point: ``run``, ``summarize`` and ``audit``.

Config files are JSON objects with ExperimentConfig field names; any flag
given on the command line wins over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .experiment import ExperimentConfig, ExperimentConfigError, run, summarize, sweep
from .federation.audit import audit_transcript_records
from .federation.protocol import read_transcript
from .models import Variant

DEFAULT_VARIANTS = tuple(v.value for v in Variant)
DEFAULT_LAMBDAS = (0.0, 0.1, 1.0)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridvfl", description="Split vertical federated learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate variants over seeds")
    r.add_argument("--config", help="JSON file with ExperimentConfig fields")
    r.add_argument("--variant", type=_names, help="comma list of CentralImageOnly,CentralMultimodal,ConcatVFL,HybridVFL (default: all)")
    r.add_argument("--data", choices=("synthetic", "ham"))
    r.add_argument("--metadata", help="HAM-style metadata CSV (with --data ham)")
    r.add_argument("--image-dir", help="directory of <image_id>.jpg/.png files (with --data ham)")
    r.add_argument("--epochs", type=int)
    r.add_argument("--batch", type=int, dest="batch_size")
    r.add_argument("--lr", type=float)
    r.add_argument("--lambda-cons", type=_floats, help="comma list, default 0,0.1,1; only HybridVFL runs are repeated per value")
    r.add_argument("--seeds", type=_ints, help="comma list, e.g. 0,1,2")
    r.add_argument("--n-samples", type=int, help="synthetic dataset size")
    r.add_argument("--interaction-strength", type=float)
    r.add_argument("--noise", type=float)
    r.add_argument("--image-size", type=int)
    r.add_argument("--wire-precision", choices=("f32", "f64"))
    r.add_argument("--out", dest="out_dir")

    s = sub.add_parser("summarize", help="aggregate per-seed metrics into summary.csv")
    s.add_argument("--in", dest="in_dir", required=True)

    a = sub.add_parser("audit", help="check message kinds and round structure of a transcript")
    a.add_argument("--transcript", required=True)
    return parser


def _run(args) -> int:
    base: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    variants = args.variant or _as_list(base.pop("variant", list(DEFAULT_VARIANTS)))
    lambdas = args.lambda_cons or _as_list(base.pop("lambda_cons", list(DEFAULT_LAMBDAS)))
    cfg = ExperimentConfig.from_mapping(base)
    overrides = {
        k: getattr(args, k)
        for k in (
            "data", "metadata", "image_dir", "epochs", "batch_size", "lr", "seeds", "n_samples",
            "interaction_strength", "noise", "image_size", "wire_precision", "out_dir",
        )
        if getattr(args, k) is not None
    }
    cfg = replace(cfg, **overrides)
    configs = sweep(cfg, variants, lambdas)
    for c in configs:
        c.validate()
    for c in configs:
        results = run(c)
        for res in results:
            print(
                f"{c.run_name} seed={res.seed} macro_f1={float(res.metrics['macro_f1']):.4f} "
                f"accuracy={float(res.metrics['accuracy']):.4f} "
                f"loss {res.initial_loss:.4f}->{res.epoch_losses[-1] if res.epoch_losses else res.initial_loss:.4f}"
                + ("" if res.audit_passed is None else f" audit={'pass' if res.audit_passed else 'FAIL'}")
            )
    path = summarize(cfg.out_dir)
    print(f"summary written to {path}")
    return 0


def _as_list(v):
    return v if isinstance(v, list) else [v]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "summarize":
            print(summarize(args.in_dir).read_text(encoding="utf-8"), end="")
            return 0
        report = audit_transcript_records(read_transcript(args.transcript))
        print(report.to_text(), end="")
        return 0 if report.passed else 1
    except (ExperimentConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
