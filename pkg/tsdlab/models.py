"""
Toy trainable models on planted tasks.

A planted task fixes a random pretrained weight W and an optimal weight
W* = W + sum_i c_i u_i v_i^T that differs from W only along chosen core
directions, so the ground-truth task-specific directions are known exactly.
Samples are rows: predictions are x W^T.
"""

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .adapters import (
    DEFAULT_DASH_COUNT,
    AdapterState,
    current_delta,
    enter_dash_phase,
    merged_weight,
    parameters,
)
from .errors import InvalidArgument, NumericDivergence, ReportError, ShapeMismatch
from .optim import make_optimizer
from .spectral import DEFAULT_EPSILON, ChangeRates, Matrix, SvdFactors, as_matrix, change_rates, svd, top_k

logger = logging.getLogger(__name__)

LTSD_COUNT = 8
DEFAULT_PRELAUNCH_STEPS = 100

DashSelector = Callable[[ChangeRates], Sequence[int]]


class TaskSpec(BaseModel):
    """Synthetic task with a planted optimal weight."""

    kind: Literal["planted_linear", "planted_mlp"] = "planted_linear"
    n: int = Field(16, ge=1)
    m: int = Field(32, ge=1)
    planted_indices: List[int] = Field(default_factory=list)
    planted_coeffs: List[float] = Field(default_factory=list)
    # used when planted_indices is empty
    plant_count: int = Field(4, ge=0)
    plant_region: Literal["any", "lower", "upper"] = "lower"
    coeff_low: float = 0.8
    coeff_high: float = 1.2
    weight_scale: Optional[float] = Field(None, gt=0)
    noise_std: float = Field(0.01, ge=0)
    n_train: int = Field(512, ge=1)
    n_val: int = Field(256, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_plants(self):
        if len(set(self.planted_indices)) != len(self.planted_indices):
            raise ValueError("planted_indices must be distinct")
        if self.planted_coeffs and len(self.planted_coeffs) != len(self.planted_indices):
            raise ValueError("planted_coeffs must match planted_indices in length")
        if self.coeff_low > self.coeff_high:
            raise ValueError("coeff_low must not exceed coeff_high")
        return self


class TrainConfig(BaseModel):
    """Optimizer and phase schedule of one training run."""

    lr: float = Field(0.01, ge=0)
    steps: int = Field(500, ge=1)
    batch: int = Field(16, ge=1)
    optimizer: Literal["sgd", "adam"] = "adam"
    t_prelaunch: int = Field(DEFAULT_PRELAUNCH_STEPS, ge=0)
    s_dash: int = Field(DEFAULT_DASH_COUNT, ge=1)
    record_every: int = Field(100, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_schedule(self):
        if self.t_prelaunch > self.steps:
            raise ValueError(f"t_prelaunch ({self.t_prelaunch}) exceeds steps ({self.steps})")
        return self


@dataclass
class Dataset:
    x: Matrix  # samples x inputs
    y: Matrix  # samples x targets

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def checksum(self) -> str:
        """md5 of the raw bytes of x and y."""
        h = hashlib.md5()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


@dataclass
class PlantedTask:
    spec: TaskSpec
    base_w: Matrix
    w_star: Matrix
    train: Dataset
    val: Dataset
    indices: List[int]
    coeffs: List[float]
    front: Optional[Matrix] = None  # frozen first layer of planted_mlp

    def features(self, x: Matrix) -> Matrix:
        """Inputs of the adapted layer."""
        if self.front is None:
            return x
        return np.tanh(x @ self.front.T)

    def lifted(self, data: Dataset) -> Dataset:
        return Dataset(self.features(data.x), data.y)


@dataclass
class Gradients:
    a: Matrix
    b: Matrix
    dsigma: Optional[np.ndarray] = None

    def as_dict(self) -> Dict[str, np.ndarray]:
        out = {"a": self.a, "b": self.b}
        if self.dsigma is not None:
            out["dsigma"] = self.dsigma
        return out


@dataclass
class TrainTrace:
    losses: List[float] = field(default_factory=list)
    val_losses: List[Tuple[int, float]] = field(default_factory=list)
    ltsd_snapshots: List[Tuple[int, List[int]]] = field(default_factory=list)
    final_state: Optional[AdapterState] = None
    launch_step: Optional[int] = None
    launch_rates: Optional[ChangeRates] = None

    def snapshot_at(self, step: int) -> Optional[List[int]]:
        for s, idx in self.ltsd_snapshots:
            if s == step:
                return idx
        return None

    def to_csv(self, path: str) -> None:
        """Write step,loss,val_loss,ltsd_indices (indices ';'-joined)."""
        val = dict(self.val_losses)
        snaps = dict(self.ltsd_snapshots)
        try:
            with open(path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["step", "loss", "val_loss", "ltsd_indices"])
                for step, loss in enumerate(self.losses, start=1):
                    writer.writerow([
                        step,
                        format(loss, ".17g"),
                        format(val[step], ".17g") if step in val else "",
                        ";".join(str(i) for i in snaps[step]) if step in snaps else "",
                    ])
        except OSError as e:
            raise ReportError(f"Failed to write trace {path}: {e}") from e


def _region(k: int, region: str) -> List[int]:
    if region == "lower":
        return list(range(k // 2, k))
    if region == "upper":
        return list(range(0, k - k // 2))
    return list(range(k))


def _resolve_plants(spec: TaskSpec, k: int, rng: np.random.Generator) -> Tuple[List[int], List[float]]:
    if spec.planted_indices:
        indices = list(spec.planted_indices)
        bad = [i for i in indices if not 0 <= i < k]
        if bad:
            raise InvalidArgument(f"planted indices {bad} outside [0, {k})")
    elif spec.plant_count:
        pool = _region(k, spec.plant_region)
        if spec.plant_count > len(pool):
            raise InvalidArgument(f"cannot plant {spec.plant_count} directions in a pool of {len(pool)}")
        indices = sorted(int(i) for i in rng.choice(pool, size=spec.plant_count, replace=False))
    else:
        indices = []

    if spec.planted_coeffs:
        coeffs = [float(c) for c in spec.planted_coeffs]
    else:
        coeffs = [float(c) for c in rng.uniform(spec.coeff_low, spec.coeff_high, size=len(indices))]
    return indices, coeffs


def gen_task(spec: TaskSpec) -> PlantedTask:
    """
    Generate a planted task deterministically from ``spec.seed``.

    Args:
        spec: Task description

    Returns:
        PlantedTask with the pretrained W, the planted W* and both datasets
    """
    rng = np.random.default_rng(spec.seed)
    n, m = spec.n, spec.m
    k = min(n, m)
    scale = spec.weight_scale if spec.weight_scale is not None else 1.0 / np.sqrt(m)

    base_w = rng.standard_normal((n, m)) * scale
    f = svd(base_w)
    indices, coeffs = _resolve_plants(spec, k, rng)

    w_star = base_w.copy()
    for i, c in zip(indices, coeffs):
        w_star += c * np.outer(f.u[:, i], f.vt[i])

    front = None
    if spec.kind == "planted_mlp":
        front = rng.standard_normal((m, m)) / np.sqrt(m)

    task = PlantedTask(
        spec=spec, base_w=base_w, w_star=w_star,
        train=Dataset(np.empty((0, m)), np.empty((0, n))),
        val=Dataset(np.empty((0, m)), np.empty((0, n))),
        indices=indices, coeffs=coeffs, front=front,
    )
    task.train = _sample(task, rng, spec.n_train)
    task.val = _sample(task, rng, spec.n_val)
    return task


def _sample(task: PlantedTask, rng: np.random.Generator, count: int) -> Dataset:
    spec = task.spec
    x = rng.standard_normal((count, spec.m))
    noise = rng.standard_normal((count, spec.n))
    y = task.features(x) @ task.w_star.T + spec.noise_std * noise
    return Dataset(x, y)


def forward(state: AdapterState, x: Matrix) -> Matrix:
    """Layer output x W_merged^T."""
    w = merged_weight(state)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has shape {x.shape}, layer expects {w.shape[1]} columns")
    return x @ w.T


def loss_mse(pred: Matrix, target: Matrix) -> float:
    """Mean squared entry difference."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def _output_gradient(w: Matrix, batch: Dataset) -> Tuple[float, Matrix]:
    err = batch.x @ w.T - batch.y
    loss = float(np.mean(err * err))
    g = (2.0 / err.size) * (err.T @ batch.x)
    return loss, g


def loss_and_grads(state: AdapterState, batch: Dataset) -> Tuple[float, Gradients]:
    """
    MSE loss and its exact gradients w.r.t. the trainable parameters.

    With G = dL/dW_merged, dA = s G B^T, dB = s A^T G (s = alpha / r) and
    dDsigma_i = u_bar_i^T G v_bar_i.
    """
    if len(batch) == 0:
        raise InvalidArgument("empty batch")
    loss, g = _output_gradient(merged_weight(state), batch)
    core = state.core
    s = core.scaling
    dsigma = None
    if state.dash is not None:
        dsigma = np.sum(state.dash.u_bar * (g @ state.dash.v_bar), axis=0)
    return loss, Gradients(a=s * (g @ core.b.T), b=s * (core.a.T @ g), dsigma=dsigma)


def grads(state: AdapterState, batch: Dataset) -> Gradients:
    return loss_and_grads(state, batch)[1]


def evaluate(state: AdapterState, data: Dataset) -> float:
    return loss_mse(forward(state, data.x), data.y)


def _batches(rng: np.random.Generator, count: int, batch: int) -> Iterator[np.ndarray]:
    """Seeded reshuffle every epoch; a trailing partial batch is dropped."""
    batch = min(batch, count)
    while True:
        order = rng.permutation(count)
        for start in range(0, count - batch + 1, batch):
            yield order[start:start + batch]


def ltsd(f: SvdFactors, state: AdapterState, count: int = LTSD_COUNT,
         epsilon: float = DEFAULT_EPSILON) -> List[int]:
    """Top change-rate directions of the state's current update."""
    return top_k(change_rates(f, current_delta(state), epsilon), min(count, f.k))


def train(
    state: AdapterState,
    task: PlantedTask,
    cfg: TrainConfig,
    f: SvdFactors,
    dash_select: Optional[DashSelector] = None,
    init_select: Optional[DashSelector] = None,
    epsilon: float = DEFAULT_EPSILON,
) -> TrainTrace:
    """
    Run ``cfg.steps`` optimizer steps on the adapter.

    After ``cfg.t_prelaunch`` steps a pre-launch state (dash, tsd, or a pending
    init) measures the change rates of its current update against ``f`` and
    enters the dash phase. LTSD snapshots and validation losses are recorded
    every ``cfg.record_every`` steps.

    Args:
        state: Initial adapter state (left untouched)
        task: Planted task providing the data
        cfg: Training configuration
        f: Factors of the pretrained W
        dash_select: Optional override choosing the launched directions
        init_select: Optional override choosing the split directions

    Returns:
        TrainTrace with per-step losses and the final state
    """
    state = state.copy()
    rng = np.random.default_rng(cfg.seed)
    train_set = task.lifted(task.train)
    val_set = task.lifted(task.val)
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    batches = _batches(rng, len(train_set), cfg.batch)
    trace = TrainTrace()

    for step in range(1, cfg.steps + 1):
        if step - 1 == cfg.t_prelaunch and state.phase == "prelaunch":
            cr = change_rates(f, current_delta(state), epsilon)
            dash_idx = dash_select(cr) if dash_select is not None else None
            init_idx = init_select(cr) if init_select is not None and state.method != "dash" else None
            state = enter_dash_phase(state, f, cr, min(cfg.s_dash, f.k), dash_idx, init_idx)
            if state.method in ("tsd", "init"):
                optimizer.reset(["a", "b"])
            trace.launch_step = step - 1
            trace.launch_rates = cr
            logger.debug("step %d: %s entered dash phase", step - 1, state.method)

        loss, g = loss_and_grads(state, train_set.take(next(batches)))
        if not np.isfinite(loss):
            raise NumericDivergence(f"non-finite loss at step {step} ({state.method})")
        trace.losses.append(loss)
        optimizer.step(parameters(state), g.as_dict())

        if step % cfg.record_every == 0:
            val = evaluate(state, val_set)
            snap = ltsd(f, state, epsilon=epsilon)
            trace.val_losses.append((step, val))
            trace.ltsd_snapshots.append((step, snap))
            logger.debug("step %d: loss %.6g val %.6g ltsd %s", step, loss, val, snap)

    trace.final_state = state
    return trace


def train_full(w: Matrix, task: PlantedTask, cfg: TrainConfig) -> Matrix:
    """
    Fully fine-tune a dense copy of ``w`` with the same optimizer and batches.

    Returns:
        The final dense weight (an estimate of W*)
    """
    weights = {"w": np.array(as_matrix(w, "w"), dtype=np.float64, copy=True)}
    rng = np.random.default_rng(cfg.seed)
    train_set = task.lifted(task.train)
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    batches = _batches(rng, len(train_set), cfg.batch)

    for step in range(1, cfg.steps + 1):
        loss, g = _output_gradient(weights["w"], train_set.take(next(batches)))
        if not np.isfinite(loss):
            raise NumericDivergence(f"non-finite loss at step {step} (full fine-tuning)")
        optimizer.step(weights, {"w": g})
    return weights["w"]
