"""
Command-line front end: ``python -m tsdlab <subcommand>``.

Exit codes: 0 success, 2 usage/config/I-O error, 3 numeric divergence.
"""

import argparse
import csv
import logging
import os
import sys
from typing import Dict, List, Optional

from pydantic import ValidationError

from config.loader import RunConfig, dump_effective_config, resolve_config
from config.settings import Settings

from .adapters import current_delta, load_state, new_state, save_state
from .errors import ConfigError, DegenerateProjection, NumericDivergence, ReportError, ShapeMismatch, TsdLabError
from .harness import ExperimentRunner, ReportRow, read_report_csv, write_report
from .matrix_io import load_matrix, write_tsdw
from .metrics import (
    MetricsRow,
    TsdGroundTruth,
    alignment,
    amplification,
    format_value,
    ground_truth_tsd,
    pr_score,
    shared_direction_ranks,
    task_overlap,
    write_metrics_csv,
)
from .models import LTSD_COUNT, gen_task, train
from .spectral import Matrix, SvdFactors, change_rates, core_energy_fraction, frob_norm, scaled_rates, svd, top_k

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

EFFECTIVE_CONFIG = "effective_config.txt"
ORACLE_HEADER = ["index", "sigma", "signed_delta", "abs_delta", "scaled", "rank"]
ORACLE_SUMMARY_HEADER = ["quantity", "value"]
OVERLAP_HEADER = ["k", "overlap"]
SHARED_RANKS_HEADER = ["index", "rank_a", "rank_b"]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, beats the file)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed of every stochastic choice")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsdlab", description="Task-specific direction experiments on planted tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    oracle = sub.add_parser("oracle", help="change-rate spectrum of a weight pair")
    oracle.add_argument("w", help="pretrained weight (TSDW or CSV)")
    oracle.add_argument("w_star", help="optimal or fine-tuned weight (TSDW or CSV)")
    oracle.add_argument("--epsilon", type=float, help="change-rate regularizer")
    _add_common(oracle)

    for name, text in (
        ("train", "train one adapter method on a planted task"),
        ("ablate", "run a method/ablation matrix over seeds"),
        ("analyze", "metrics of a saved adapter state"),
        ("report", "merge report.csv files under results_dir"),
    ):
        _add_common(sub.add_parser(name, help=text))
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.quiet:
        level = logging.WARNING
    elif args.verbose or Settings().verbose:
        level = logging.DEBUG
    else:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("tsdlab").setLevel(level)


def _resolve(args: argparse.Namespace, extra: Optional[Dict[str, str]] = None) -> RunConfig:
    seed = str(args.seed) if args.seed is not None else None
    # --seed replaces any seeds list so the grid and effective config agree
    flags = {"out_dir": args.out, "seed": seed, "seeds": seed}
    flags.update(extra or {})
    return resolve_config(args.config, args.overrides, flags)


def _write_rows(path: str, header: List[str], rows: List[list]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(v) for v in row])
    except OSError as e:
        raise ReportError(f"Failed to write {path}: {e}") from e


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _resolve(args, {
        "w_path": args.w,
        "w_star_path": args.w_star,
        "epsilon": repr(args.epsilon) if args.epsilon is not None else None,
    })
    w = load_matrix(cfg.w_path)
    w_star = load_matrix(cfg.w_star_path)
    if w.shape != w_star.shape:
        raise ShapeMismatch(f"{cfg.w_path} is {w.shape}, {cfg.w_star_path} is {w_star.shape}")

    f = svd(w)
    truth = ground_truth_tsd(w, w_star, cfg.epsilon, f)
    rates = truth.rates
    rank_of = {int(idx): pos + 1 for pos, idx in enumerate(rates.ranking)}
    scaled = scaled_rates(rates.delta)

    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_effective_config(cfg, os.path.join(cfg.out_dir, EFFECTIVE_CONFIG))
    _write_rows(os.path.join(cfg.out_dir, "oracle.csv"), ORACLE_HEADER, [
        [i, f.sigma[i], rates.signed[i], rates.delta[i], scaled[i], rank_of[i]]
        for i in range(len(rates))
    ])
    delta_w = w_star - w
    _write_rows(os.path.join(cfg.out_dir, "oracle_summary.csv"), ORACLE_SUMMARY_HEADER, [
        ["delta_frob_norm", frob_norm(delta_w)],
        ["core_energy_fraction", core_energy_fraction(f, delta_w)],
    ])
    logger.info("top directions: %s", top_k(rates, min(4, len(rates))))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    dump_effective_config(cfg, os.path.join(out, EFFECTIVE_CONFIG))

    task = gen_task(cfg.task_spec())
    f = svd(task.base_w)
    state = new_state(cfg.method, task.base_w, cfg.rank, cfg.alpha, cfg.seed)
    trace = train(state, task, cfg.train_config(), f, epsilon=cfg.epsilon)

    trace.to_csv(os.path.join(out, "trace.csv"))
    save_state(trace.final_state, os.path.join(out, "state"))
    write_tsdw(os.path.join(out, "base.tsdw"), task.base_w)
    write_tsdw(os.path.join(out, "w_star.tsdw"), task.w_star)
    logger.info("%s: final loss %.6g after %d steps", cfg.method, trace.losses[-1], len(trace.losses))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_effective_config(cfg, os.path.join(cfg.out_dir, EFFECTIVE_CONFIG))

    result = ExperimentRunner(cfg.experiment_config(), Settings().threads).run()
    write_report(result.rows, cfg.out_dir, plot=result)
    logger.info("wrote %d rows to %s", len(result.rows), cfg.out_dir)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if cfg.state_dir is None:
        raise ConfigError("analyze needs state_dir")
    if cfg.w_star_path is None:
        raise ConfigError("analyze needs w_star_path")

    state = load_state(cfg.state_dir)
    w = load_matrix(cfg.w_path) if cfg.w_path is not None else state.pretrained
    w_star = load_matrix(cfg.w_star_path)
    f = svd(w)
    truth = ground_truth_tsd(w, w_star, cfg.epsilon, f)
    rates = change_rates(f, current_delta(state), cfg.epsilon)
    pr = pr_score(top_k(rates, min(LTSD_COUNT, f.k)), truth)

    row = MetricsRow(seed=cfg.seed, step=0, precision=pr.precision, recall=pr.recall)
    if state.dash is not None:
        al = alignment(state.dash.indices, rates, truth, state.dash.count)
        row.dtsd_ltsd, row.tsd_ltsd, row.tsd_dtsd = al.dtsd_cap_ltsd, al.tsd_cap_ltsd, al.tsd_cap_dtsd
        try:
            amp = amplification(w, state)
            row.amp_all, row.amp_ab, row.amp_dash = amp.amp_all, amp.amp_ab, amp.amp_dash
        except DegenerateProjection as e:
            logger.warning("amplification unavailable: %s", e)

    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_effective_config(cfg, os.path.join(cfg.out_dir, EFFECTIVE_CONFIG))
    write_metrics_csv([row], os.path.join(cfg.out_dir, "analysis.csv"))
    if cfg.w_star_b_path is not None:
        _write_task_specificity(cfg, w, f, truth)
    return EXIT_OK


def _write_task_specificity(cfg: RunConfig, w: Matrix, f: SvdFactors, truth: TsdGroundTruth) -> None:
    """Compare the TSDs of the analyzed task with those of a second task on the same W."""
    w_star_b = load_matrix(cfg.w_star_b_path)
    truth_b = ground_truth_tsd(w, w_star_b, cfg.epsilon, f)
    ks = sorted({min(k, f.k) for k in (4, LTSD_COUNT, 16)})
    _write_rows(os.path.join(cfg.out_dir, "overlap.csv"), OVERLAP_HEADER,
                [[k, task_overlap(truth, truth_b, k)] for k in ks])
    shared = shared_direction_ranks(truth, truth_b, min(LTSD_COUNT, f.k))
    _write_rows(os.path.join(cfg.out_dir, "shared_ranks.csv"), SHARED_RANKS_HEADER, [list(r) for r in shared])
    logger.info("task overlap at k=%d: %.3g", ks[0], task_overlap(truth, truth_b, ks[0]))


def _find_reports(results_dir: str, exclude: str) -> List[str]:
    found = []
    for root, dirs, files in os.walk(results_dir):
        dirs.sort()
        if "report.csv" in files:
            path = os.path.join(root, "report.csv")
            if os.path.abspath(path) != os.path.abspath(exclude):
                found.append(path)
    return found


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    results_dir = cfg.results_dir or cfg.out_dir
    target = os.path.join(cfg.out_dir, "report.csv")

    rows: List[ReportRow] = []
    if os.path.isdir(results_dir):
        for path in _find_reports(results_dir, target):
            rows.extend(read_report_csv(path))
    rows.sort(key=ReportRow.sort_key)

    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_effective_config(cfg, os.path.join(cfg.out_dir, EFFECTIVE_CONFIG))
    write_report(rows, cfg.out_dir)
    logger.info("merged %d rows into %s", len(rows), target)
    return EXIT_OK


COMMANDS = {
    "oracle": cmd_oracle,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    _configure_logging(args)

    try:
        return COMMANDS[args.command](args)
    except NumericDivergence as e:
        print(f"tsdlab {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TsdLabError, OSError, ValidationError) as e:
        print(f"tsdlab {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
