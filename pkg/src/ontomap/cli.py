"""Command-line entry point: ``ontomap {synth,validate,forward,reverse,report}``.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .bmap import BmapError
from .corpus import CorpusError, load_corpus, term_frequencies, validate_term_span
from .evaluation import SCHEMES, StratificationError
from .glm import CollinearDesignError
from .classifiers import METHODS
from .reverse import DEFAULT_LAMBDA_GRID, ReverseConfig, run_reverse, write_reverse_outputs
from .synth import PlanError, SynthConfig, synthesize, write_synthetic
from .volume import OUTLINE_ORDERS

logger = logging.getLogger("ontomap")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _float_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _term_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _snapshot(args: argparse.Namespace) -> dict:
    """JSON-safe copy of the parsed arguments, used for exact replay.

    ``--jobs``, ``--out`` and verbosity are left out so the snapshot does
    not depend on the degree of parallelism or on where outputs go.
    """
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "jobs", "verbose", "out"):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def cmd_synth(args) -> int:
    overrides = dict(noise_sigma=args.noise, effect_amplitude=args.effect,
                     study_effect_amplitude=args.study_effect)
    if args.studies is None or args.studies == SynthConfig().n_studies:
        config = SynthConfig.paper_default(**overrides)
    else:
        # per-study subject and condition counts are sampled for custom sizes
        config = SynthConfig(n_studies=args.studies, **overrides)
    corpus, gt, ledger = synthesize(config, seed=args.seed)
    manifest = write_synthetic(args.out, corpus, gt, ledger)
    freqs = term_frequencies(corpus)
    print(f"wrote {manifest}")
    print(f"studies={len(corpus.studies)} maps={corpus.n_maps} subjects={ledger['n_subjects']} "
          f"conditions={ledger['n_conditions']} voxels={corpus.mask.p} seed={args.seed}")
    for t, n in sorted(freqs.items(), key=lambda kv: -kv[1]):
        print(f"  {t:<28s} {n:5d} maps")
    return EXIT_OK


def cmd_validate(args) -> int:
    corpus = load_corpus(args.corpus, strict=args.strict)
    span = validate_term_span(corpus)
    print(f"{args.corpus}: {len(corpus.studies)} studies, {corpus.n_maps} maps, {corpus.mask.p} voxels")
    freqs = term_frequencies(corpus)
    bad = []
    for t in corpus.taxonomy.terms:
        s = span.get(t)
        status = "absent" if s is None else ("ok" if s.usable else "span<2")
        print(f"  {t:<28s} maps={freqs[t]:5d} studies={0 if s is None else s.n_studies:3d} {status}")
        if s is not None and not s.usable:
            bad.append(t)
    if bad and args.strict:
        raise CorpusError(f"terms present in fewer than two studies: {', '.join(bad)}")
    return EXIT_OK


def cmd_forward(args) -> int:
    from .forward import run_forward, write_forward_outputs

    corpus = load_corpus(args.corpus, strict=args.strict)
    unknown = [t for t in args.exclude if t not in corpus.taxonomy.terms]
    if unknown:
        raise CorpusError(f"unknown terms in --exclude: {', '.join(unknown)}")
    result = run_forward(corpus, args.exclude, args.alpha, args.contrast, args.sigma_map,
                         args.atlas_frac, args.outline_order)
    config = {"exclude": list(args.exclude), "alpha": args.alpha, "contrast": args.contrast,
              "sigma_map": args.sigma_map, "fraction": args.atlas_frac,
              "outline_order": args.outline_order}
    out = write_forward_outputs(result, corpus, args.out, config,
                                {"corpus": str(Path(args.corpus).resolve()), "args": _snapshot(args)})
    for term, res in result.contrasts.items():
        logger.info("%s: %d significant voxels", term, res.n_significant)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_reverse(args) -> int:
    corpus = load_corpus(args.corpus, strict=args.strict)
    config = ReverseConfig(method=args.method, cv=args.cv, lambda_grid=args.lambda_grid,
                           parcel_ratio=args.parcel_ratio, select_fraction=args.select_frac,
                           n_splits=args.splits, n_permutations=args.permutations,
                           sigma_map=args.sigma_map, atlas_fraction=args.atlas_frac,
                           outline_order=args.outline_order, atlas=not args.no_atlas,
                           seed=args.seed)
    result = run_reverse(corpus, config, jobs=args.jobs)
    out = write_reverse_outputs(result, args.out,
                                {"corpus": str(Path(args.corpus).resolve()), "args": _snapshot(args)})
    for s in result.summaries:
        print(f"  {s.term:<28s} P={s.precision:.3f} R={s.recall:.3f} "
              f"chance P={s.precision_chance:.3f} R={s.recall_chance:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report

    out = write_report(args.run)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ontomap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    def corpus_args(sp):
        sp.add_argument("--corpus", required=True, help="corpus manifest (JSON)")
        sp.add_argument("--strict", action="store_true", help="treat warnings as validation errors")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--studies", type=int, default=None, help="number of studies (default 19)")
    sp.add_argument("--noise", type=float, default=1.0, help="noise standard deviation")
    sp.add_argument("--effect", type=float, default=1.0, help="term effect amplitude")
    sp.add_argument("--study-effect", type=float, default=SynthConfig().study_effect_amplitude,
                    help="per-study confound amplitude")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate", help="load and check a corpus")
    corpus_args(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("forward", help="GLM forward inference")
    corpus_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--exclude", type=_term_list, default=(), help="comma-separated terms to drop")
    sp.add_argument("--alpha", type=float, default=0.05, help="family-wise error rate")
    sp.add_argument("--contrast", choices=("indicator", "category-mean"), default="indicator")
    sp.add_argument("--sigma-map", type=float, default=2.0, help="outline smoothing (voxels)")
    sp.add_argument("--atlas-frac", type=float, default=0.05, help="outline voxel fraction")
    sp.add_argument("--outline-order", choices=OUTLINE_ORDERS, default=OUTLINE_ORDERS[0])
    sp.add_argument("--seed", type=int, default=0, help="recorded only; the GLM is deterministic")
    sp.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; unused")
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("reverse", help="cross-validated reverse inference")
    corpus_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=METHODS, default="logistic-weighted")
    sp.add_argument("--cv", choices=SCHEMES, default="leave-one-study-out")
    sp.add_argument("--lambda-grid", type=_float_list, default=DEFAULT_LAMBDA_GRID,
                    help="comma-separated penalty values")
    sp.add_argument("--parcel-ratio", type=float, default=0.31, help="parcels per voxel")
    sp.add_argument("--select-frac", type=float, default=0.3, help="fraction of parcels kept by ANOVA")
    sp.add_argument("--splits", type=int, default=10, help="inner shuffle splits")
    sp.add_argument("--permutations", type=int, default=100, help="label permutations (0: analytic only)")
    sp.add_argument("--sigma-map", type=float, default=2.0, help="atlas smoothing (voxels)")
    sp.add_argument("--atlas-frac", type=float, default=0.05, help="atlas outline voxel fraction")
    sp.add_argument("--outline-order", choices=OUTLINE_ORDERS, default=OUTLINE_ORDERS[0])
    sp.add_argument("--no-atlas", action="store_true", help="skip the full-corpus atlas fit")
    sp.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_reverse)

    sp = sub.add_parser("report", help="static report for a finished run")
    sp.add_argument("run", help="run directory written by forward or reverse")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CollinearDesignError as e:
        print(f"error: {e}", file=sys.stderr)
        for group in e.groups:
            print(f"  collinear columns: {', '.join(group)} (exclude one with --exclude)", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CorpusError, PlanError, BmapError, StratificationError, FileNotFoundError, KeyError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
