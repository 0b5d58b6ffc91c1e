"""
Experiment orchestration: method and ablation matrices over paired seeds.

Every seed generates one planted task that all cells share, so method
comparisons are paired. Seeds run in parallel; rows are merged in a fixed
(method, mode, t, s, seed) order so reports are byte-identical on rerun.
"""

import csv
import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from config.settings import Settings

from .adapters import AdapterState, current_delta, new_state
from .errors import DegenerateProjection, InvalidArgument, ReportError
from .metrics import (
    MetricsRow,
    TsdGroundTruth,
    alignment,
    amplification,
    average_by_step,
    format_value,
    ground_truth_tsd,
    pr_score,
    write_metrics_csv,
)
from .models import (
    LTSD_COUNT,
    PlantedTask,
    TaskSpec,
    TrainConfig,
    TrainTrace,
    evaluate,
    gen_task,
    loss_mse,
    train,
    train_full,
)
from .spectral import DEFAULT_EPSILON, ChangeRates, SvdFactors, change_rates, scaled_rates, svd, top_k

logger = logging.getLogger(__name__)

MethodName = Literal["full_ft", "lora", "dash", "init", "tsd"]
DirectionMode = Literal["tsd", "top", "bottom", "random", "all", "top_plus_bottom"]
InitMode = Literal["tsd", "top", "bottom", "random"]

METHOD_ORDER = ("full_ft", "lora", "dash", "init", "tsd")
DIRECTION_MODES = ("tsd", "top", "bottom", "random", "all", "top_plus_bottom")
INIT_MODES = ("tsd", "top", "bottom", "random")

# separates the random init draw from the random dash draw of the same seed
_INIT_SEED_OFFSET = 1_000_003


class ExperimentConfig(BaseModel):
    """Method/ablation grid run over a list of paired seeds."""

    task: TaskSpec = Field(default_factory=TaskSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    methods: List[MethodName] = Field(default_factory=lambda: ["lora", "tsd"])
    direction_modes: List[DirectionMode] = Field(default_factory=lambda: ["tsd"])
    init_modes: List[InitMode] = Field(default_factory=lambda: ["tsd"])
    t_sweep: List[int] = Field(default_factory=list)
    s_sweep: List[int] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0])
    rank: int = Field(4, ge=1)
    alpha: Optional[float] = Field(None, gt=0)
    truth_source: Literal["planted", "full_ft"] = "planted"
    epsilon: float = Field(DEFAULT_EPSILON, gt=0)
    out_dir: str = "runs"

    @field_validator("methods", "seeds")
    @classmethod
    def not_empty(cls, value):
        if not value:
            raise ValueError("must not be empty")
        return value

    @model_validator(mode="after")
    def check_sweeps(self):
        k = min(self.task.n, self.task.m)
        if self.rank > k:
            raise ValueError(f"rank {self.rank} exceeds min(n, m) = {k}")
        for t in self.t_values():
            if not 0 <= t <= self.train.steps:
                raise ValueError(f"t_sweep value {t} outside [0, {self.train.steps}]")
        for s in self.s_values():
            if not 1 <= s <= k:
                raise ValueError(f"s_sweep value {s} outside [1, {k}]")
        return self

    def t_values(self) -> List[int]:
        return list(self.t_sweep) or [self.train.t_prelaunch]

    def s_values(self) -> List[int]:
        return list(self.s_sweep) or [self.train.s_dash]


class ReportRow(BaseModel):
    """One (cell, seed) result."""

    method: MethodName
    mode: str = ""
    t: int = 0
    s: int = 0
    seed: int
    final_train_loss: float
    final_val_loss: float
    precision: Optional[float] = None
    recall: Optional[float] = None
    dtsd_ltsd: Optional[float] = None
    tsd_ltsd: Optional[float] = None
    tsd_dtsd: Optional[float] = None
    amp_all: Optional[float] = None
    amp_ab: Optional[float] = None
    amp_dash: Optional[float] = None
    refs_clipped: bool = False
    data_checksum: str = ""

    @field_validator("final_train_loss", "final_val_loss")
    @classmethod
    def finite_loss(cls, value):
        if not math.isfinite(value):
            raise ValueError(f"loss must be finite, got {value}")
        return value

    def cell(self) -> Tuple[str, str, int, int]:
        return (self.method, self.mode, self.t, self.s)

    def sort_key(self):
        return (METHOD_ORDER.index(self.method), self.mode, self.t, self.s, self.seed)


REPORT_HEADER = list(ReportRow.model_fields)
NUMERIC_COLUMNS = [
    "final_train_loss", "final_val_loss", "precision", "recall",
    "dtsd_ltsd", "tsd_ltsd", "tsd_dtsd", "amp_all", "amp_ab", "amp_dash",
]
SUMMARY_HEADER = ["method", "mode", "t", "s", "seeds"] + NUMERIC_COLUMNS


@dataclass(frozen=True)
class Cell:
    method: str
    mode: str = ""
    t: int = 0
    s: int = 0

    @property
    def label(self) -> str:
        parts = [self.method]
        if self.mode:
            parts.append(self.mode)
        return "_".join(parts) + f"_t{self.t}_s{self.s}"


@dataclass
class MatrixResult:
    """Rows plus the series behind plotdata/."""

    rows: List[ReportRow] = field(default_factory=list)
    traces: Dict[Tuple[str, int], TrainTrace] = field(default_factory=dict)
    pr_series: Dict[str, List[MetricsRow]] = field(default_factory=dict)
    spectra: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def select_directions(mode: str, cr: Optional[ChangeRates], s: int, seed: int, k: Optional[int] = None) -> List[int]:
    """
    Choose the launched directions for an ablation mode.

    Args:
        mode: tsd, top, bottom, random, all or top_plus_bottom
        cr: Measured change rates (needed by mode tsd)
        s: Number of directions; ignored by mode all
        seed: Seed of the random mode
        k: Number of core directions when ``cr`` is not given

    Returns:
        Distinct core-direction indices
    """
    if k is None:
        if cr is None:
            raise InvalidArgument("select_directions needs change rates or k")
        k = len(cr)
    if mode == "all":
        return list(range(k))
    if not 1 <= s <= k:
        raise InvalidArgument(f"s must lie in [1, {k}], got {s}")
    if mode == "tsd":
        if cr is None:
            raise InvalidArgument("mode tsd needs measured change rates")
        return top_k(cr, s)
    if mode == "top":
        return list(range(s))
    if mode == "bottom":
        return list(range(k - s, k))
    if mode == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(k, size=s, replace=False))
    if mode == "top_plus_bottom":
        n_top = (s + 1) // 2
        return list(range(n_top)) + list(range(k - (s - n_top), k))
    raise InvalidArgument(f"unknown direction mode {mode!r}")


def select_init(mode: str, cr: Optional[ChangeRates], f: SvdFactors, r: int, seed: int) -> List[int]:
    """Choose the r directions moved into the LoRA pair by the init split."""
    if mode not in INIT_MODES:
        raise InvalidArgument(f"unknown init mode {mode!r}")
    return select_directions(mode, cr, r, seed, k=f.k)


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, threads: Optional[int] = None):
        """
        Runner for one experiment grid.

        Args:
            cfg: Experiment configuration
            threads: Cap on parallel seed jobs (defaults to Settings.worker_count())
        """
        self.cfg = cfg
        self.threads = threads or Settings().worker_count()

    def cells(self) -> List[Cell]:
        """Grid of cells in report order."""
        cfg = self.cfg
        out: List[Cell] = []
        for method in METHOD_ORDER:
            if method not in cfg.methods:
                continue
            if method in ("full_ft", "lora"):
                out.append(Cell(method))
            elif method == "init":
                for mode in sorted(set(cfg.init_modes)):
                    if mode == "tsd":
                        out.extend(Cell("init", mode, t, 0) for t in cfg.t_values())
                    else:
                        out.append(Cell("init", mode, 0, 0))
            else:
                k = min(cfg.task.n, cfg.task.m)
                for mode in sorted(set(cfg.direction_modes)):
                    # mode all launches every direction whatever s says
                    s_values = [k] if mode == "all" else cfg.s_values()
                    for t in cfg.t_values():
                        for s in s_values:
                            out.append(Cell(method, mode, t, s))
        return sorted(set(out), key=lambda c: (METHOD_ORDER.index(c.method), c.mode, c.t, c.s))

    def run(self) -> MatrixResult:
        cells = self.cells()
        seeds = sorted(set(self.cfg.seeds))
        logger.info("running %d cells x %d seeds on %d threads", len(cells), len(seeds), self.threads)

        with ThreadPoolExecutor(max_workers=min(self.threads, len(seeds))) as pool:
            partials = list(pool.map(lambda seed: self.run_seed(seed, cells), seeds))

        result = MatrixResult()
        pr_rows: Dict[str, List[MetricsRow]] = defaultdict(list)
        for part in partials:
            result.rows.extend(part.rows)
            result.traces.update(part.traces)
            result.spectra.update(part.spectra)
            for label, rows in part.pr_series.items():
                pr_rows[label].extend(rows)
        result.rows.sort(key=ReportRow.sort_key)
        result.pr_series = {label: average_by_step(rows) for label, rows in sorted(pr_rows.items())}
        return result

    def run_seed(self, seed: int, cells: List[Cell]) -> MatrixResult:
        """Run every cell on the task of one seed."""
        cfg = self.cfg
        task = gen_task(cfg.task.model_copy(update={"seed": seed}))
        f = svd(task.base_w)
        checksum = task.train.checksum()

        w_ft = None
        if cfg.truth_source == "full_ft" or "full_ft" in cfg.methods:
            w_ft = train_full(task.base_w, task, cfg.train.model_copy(update={"seed": seed}))
        w_truth = w_ft if cfg.truth_source == "full_ft" else task.w_star
        truth = ground_truth_tsd(task.base_w, w_truth, cfg.epsilon, f)

        out = MatrixResult()
        out.spectra[seed] = (np.array(f.sigma), np.array(truth.rates.delta))
        for cell in cells:
            if cell.method == "full_ft":
                row = self._full_ft_row(task, f, truth, w_ft, seed)
            else:
                trace = self._train_cell(cell, task, f, seed)
                row = self._adapter_row(cell, task, f, truth, trace, seed)
                out.traces[(cell.label, seed)] = trace
                out.pr_series[cell.label] = self._pr_series(trace, truth, seed)
            row.data_checksum = checksum
            out.rows.append(row)
            logger.info("seed %d %s: val loss %.6g", seed, cell.label, row.final_val_loss)
        return out

    def _train_cell(self, cell: Cell, task: PlantedTask, f: SvdFactors, seed: int) -> TrainTrace:
        cfg = self.cfg
        t = cell.t if cell.method in ("dash", "tsd", "init") and cell.mode else cfg.train.t_prelaunch
        train_cfg = cfg.train.model_copy(update={
            "seed": seed,
            "t_prelaunch": t,
            "s_dash": cell.s or cfg.train.s_dash,
        })

        if cell.method == "init" and cell.mode != "tsd":
            init_idx = select_init(cell.mode, None, f, cfg.rank, seed + _INIT_SEED_OFFSET)
            state = new_state("init", task.base_w, cfg.rank, cfg.alpha, seed, f=f, init_indices=init_idx)
            return train(state, task, train_cfg, f, epsilon=cfg.epsilon)

        state = new_state(cell.method, task.base_w, cfg.rank, cfg.alpha, seed)
        dash_select = None
        init_select = None
        if cell.method in ("dash", "tsd"):
            def dash_select(cr: ChangeRates) -> List[int]:
                return select_directions(cell.mode, cr, cell.s, seed)
        if cell.method == "tsd":
            split_mode = cell.mode if cell.mode in INIT_MODES else "tsd"

            def init_select(cr: ChangeRates) -> List[int]:
                return select_init(split_mode, cr, f, cfg.rank, seed + _INIT_SEED_OFFSET)
        return train(state, task, train_cfg, f, dash_select=dash_select, init_select=init_select,
                     epsilon=cfg.epsilon)

    def _adapter_row(self, cell: Cell, task: PlantedTask, f: SvdFactors, truth: TsdGroundTruth,
                     trace: TrainTrace, seed: int) -> ReportRow:
        final = trace.final_state
        count = min(LTSD_COUNT, f.k)
        if trace.launch_rates is not None:
            pred = top_k(trace.launch_rates, count)
        else:
            pred = top_k(change_rates(f, current_delta(final), self.cfg.epsilon), count)
        pr = pr_score(pred, truth)

        launched = len(final.dash.indices) if final.dash is not None else cell.s
        row = ReportRow(
            method=cell.method, mode=cell.mode, t=cell.t, s=launched, seed=seed,
            final_train_loss=evaluate(final, task.lifted(task.train)),
            final_val_loss=evaluate(final, task.lifted(task.val)),
            precision=pr.precision, recall=pr.recall,
            refs_clipped=truth.refs_clipped,
        )
        if final.dash is not None:
            self._dash_metrics(row, final, f, truth)
        return row

    def _dash_metrics(self, row: ReportRow, state: AdapterState, f: SvdFactors, truth: TsdGroundTruth) -> None:
        dtsd_rates = change_rates(f, current_delta(state), self.cfg.epsilon)
        launched = state.dash.indices
        al = alignment(launched, dtsd_rates, truth, len(launched))
        row.dtsd_ltsd = al.dtsd_cap_ltsd
        row.tsd_ltsd = al.tsd_cap_ltsd
        row.tsd_dtsd = al.tsd_cap_dtsd
        try:
            amp = amplification(state.pretrained, state)
        except DegenerateProjection as e:
            logger.warning("seed %d %s: amplification unavailable (%s)", row.seed, row.method, e)
            return
        row.amp_all = amp.amp_all
        row.amp_ab = amp.amp_ab
        row.amp_dash = amp.amp_dash

    def _full_ft_row(self, task: PlantedTask, f: SvdFactors, truth: TsdGroundTruth,
                     w_ft: np.ndarray, seed: int) -> ReportRow:
        rates = change_rates(f, w_ft - task.base_w, self.cfg.epsilon)
        pr = pr_score(top_k(rates, min(LTSD_COUNT, f.k)), truth)
        train_set, val_set = task.lifted(task.train), task.lifted(task.val)
        return ReportRow(
            method="full_ft", seed=seed,
            final_train_loss=loss_mse(train_set.x @ w_ft.T, train_set.y),
            final_val_loss=loss_mse(val_set.x @ w_ft.T, val_set.y),
            precision=pr.precision, recall=pr.recall,
            refs_clipped=truth.refs_clipped,
        )

    def _pr_series(self, trace: TrainTrace, truth: TsdGroundTruth, seed: int) -> List[MetricsRow]:
        rows = []
        for step, snap in trace.ltsd_snapshots:
            pr = pr_score(snap, truth)
            rows.append(MetricsRow(seed=seed, step=step, precision=pr.precision, recall=pr.recall))
        return rows


def run_matrix(cfg: ExperimentConfig, threads: Optional[int] = None) -> List[ReportRow]:
    """Run the full grid and return one row per (cell, seed)."""
    return ExperimentRunner(cfg, threads).run().rows


def summarize(rows: List[ReportRow]) -> List[Dict[str, object]]:
    """Mean of every numeric column per cell across seeds; missing values are skipped."""
    groups: Dict[Tuple[str, str, int, int], List[ReportRow]] = defaultdict(list)
    for row in rows:
        groups[row.cell()].append(row)
    out = []
    for cell in sorted(groups, key=lambda c: (METHOD_ORDER.index(c[0]), c[1], c[2], c[3])):
        members = groups[cell]
        entry: Dict[str, object] = dict(zip(("method", "mode", "t", "s"), cell))
        entry["seeds"] = len(members)
        for name in NUMERIC_COLUMNS:
            present = [getattr(r, name) for r in members if getattr(r, name) is not None]
            entry[name] = math.fsum(present) / len(present) if present else None
        out.append(entry)
    return out


def write_report(rows: List[ReportRow], out_dir: str, plot: Optional[MatrixResult] = None) -> List[str]:
    """
    Write report.csv, report.json and summary.csv, plus plotdata/ when the
    run's series are given.

    Args:
        rows: Report rows
        out_dir: Output directory, created when missing
        plot: Series collected by ExperimentRunner.run

    Returns:
        Paths of the written files
    """
    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        report_csv = os.path.join(out_dir, "report.csv")
        with open(report_csv, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for row in rows:
                writer.writerow([format_value(getattr(row, name)) for name in REPORT_HEADER])
        written.append(report_csv)

        report_json = os.path.join(out_dir, "report.json")
        with open(report_json, "w") as f:
            json.dump([row.model_dump() for row in rows], f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(report_json)

        summary_csv = os.path.join(out_dir, "summary.csv")
        with open(summary_csv, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SUMMARY_HEADER)
            for entry in summarize(rows):
                writer.writerow([format_value(entry[name]) for name in SUMMARY_HEADER])
        written.append(summary_csv)
    except OSError as e:
        raise ReportError(f"Failed to write report to {out_dir}: {e}") from e

    if plot is not None:
        written.extend(_write_plotdata(plot, os.path.join(out_dir, "plotdata")))
    return written


def _write_plotdata(plot: MatrixResult, plot_dir: str) -> List[str]:
    written = []
    try:
        os.makedirs(plot_dir, exist_ok=True)
        for seed, (sigma, delta) in sorted(plot.spectra.items()):
            path = os.path.join(plot_dir, f"spectrum_seed{seed}.csv")
            with open(path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["index", "sigma", "delta", "scaled"])
                for i, (sv, d, sc) in enumerate(zip(sigma, delta, scaled_rates(delta))):
                    writer.writerow([i, format_value(float(sv)), format_value(float(d)), format_value(float(sc))])
            written.append(path)
    except OSError as e:
        raise ReportError(f"Failed to write plot data to {plot_dir}: {e}") from e

    for (label, seed), trace in sorted(plot.traces.items()):
        path = os.path.join(plot_dir, f"loss_{label}_seed{seed}.csv")
        trace.to_csv(path)
        written.append(path)
    for label, rows in plot.pr_series.items():
        path = os.path.join(plot_dir, f"pr_{label}.csv")
        write_metrics_csv(rows, path)
        written.append(path)
    return written


def read_report_csv(path: str) -> List[ReportRow]:
    """Parse a report.csv written by write_report."""
    optional = {name for name, info in ReportRow.model_fields.items() if not info.is_required()
                and name not in ("mode", "data_checksum")}
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is not None and list(reader.fieldnames) != REPORT_HEADER:
                raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
            records = list(reader)
    except OSError as e:
        raise ReportError(f"Failed to read report {path}: {e}") from e

    rows = []
    for record in records:
        values = {k: (None if k in optional and v == "" else v) for k, v in record.items()}
        rows.append(ReportRow.model_validate({k: v for k, v in values.items() if v is not None}))
    return rows
