"""Command-line entry point: ``sinus-analysis <command> ...``.

Exit codes: 0 success, 1 some subjects failed, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import cohort
from .augment import ElasticParams
from .phantom import PhantomError
from .schema import schema_table

logger = logging.getLogger("sinus_analysis")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinus-analysis", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="features and scores for paired image/mask directories")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--remap", help="CSV mapping external label codes to schema codes")
    p.add_argument("--reference-volumes", help="JSON of sinus -> normal volume (mm^3)")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("evaluate", help="DSC / ASSD of predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--remap", help="CSV remap applied to predictions")
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("score", help="LMS totals and histogram from an analyze cohort.csv")
    p.add_argument("--cohort", required=True, help="cohort.csv or the analyze output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--reference-volumes")
    p.add_argument("--reports", help="report CSV: subject_id, sinus, side, health_label")

    p = sub.add_parser("augment", help="flip + elastic multiplication of a dataset")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--control-spacing", type=float, default=ElasticParams.control_spacing_mm)
    p.add_argument("--max-displacement", type=float, default=ElasticParams.max_displacement_mm)
    p.add_argument("--smoothing-sigma", type=float, default=ElasticParams.smoothing_sigma_mm)
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("phantom", help="write synthetic phantoms with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="phantom spec JSON (default: the standard phantom)")
    p.add_argument("--count", type=_positive_int, default=1, help="number of random cohort phantoms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float)

    p = sub.add_parser("schema", help="print the label table as JSON")
    p.add_argument("--out", help="write to this file instead of stdout")
    return parser


def _dispatch(args) -> cohort.RunResult | None:
    if args.command == "analyze":
        return cohort.analyze(
            args.images, args.masks, args.out, args.remap, args.reference_volumes, args.jobs, args.connectivity
        )
    if args.command == "evaluate":
        return cohort.evaluate(args.pred, args.ref, args.out, args.remap, args.jobs)
    if args.command == "score":
        return cohort.score(args.cohort, args.out, args.reference_volumes, args.reports)
    if args.command == "augment":
        params = ElasticParams(args.control_spacing, args.max_displacement, args.smoothing_sigma)
        return cohort.augment(args.images, args.masks, args.out, args.factor, args.seed, params, args.jobs)
    if args.command == "phantom":
        return cohort.phantoms(args.out, args.spec, args.count, args.seed, args.noise_sd)
    text = json.dumps(schema_table(), indent=2) + "\n"
    if args.out:
        from pathlib import Path

        cohort.atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        result = _dispatch(args)
    except (cohort.CohortError, PhantomError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    if result is None:
        return 0
    for subject, reason in sorted(result.failures.items()):
        logger.warning("failed: %s: %s", subject, reason)
    logger.info("%s: %d ok, %d failed", args.command, len(result.ok), len(result.failures))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
