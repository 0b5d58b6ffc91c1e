"""
Weight-update algebra for plain LoRA, LoRA-Dash, LoRA-Init and LoRA-TSD.

Row/column conventions follow the weight: W is n x m, A is n x r, B is r x m
and the LoRA update is (alpha / r) A B. The dash term sum_i dsigma_i u_i v_i^T
rides on frozen singular directions of the pretrained W and is not scaled.
"""

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidState, MatrixFormatError, ReportError
from .matrix_io import read_tsdw, write_tsdw
from .spectral import ChangeRates, Matrix, SvdFactors, as_matrix, top_k

logger = logging.getLogger(__name__)

Method = Literal["lora", "dash", "init", "tsd"]
Phase = Literal["prelaunch", "dash"]

METHODS = ("lora", "dash", "init", "tsd")
DEFAULT_DASH_COUNT = 8


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass
class LoraCore:
    """Trainable low-rank pair; the update is (alpha / r) a b."""

    a: Matrix  # n x r
    b: Matrix  # r x m
    alpha: float

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoraCore":
        return LoraCore(a=self.a.copy(), b=self.b.copy(), alpha=self.alpha)


@dataclass
class DashTerm:
    """Coordinate deltas on launched directions u_bar_i v_bar_i^T."""

    indices: List[int]
    dsigma: np.ndarray  # s, trainable
    u_bar: Matrix       # n x s, frozen
    v_bar: Matrix       # m x s, frozen

    @property
    def count(self) -> int:
        return len(self.indices)

    def copy(self) -> "DashTerm":
        # u_bar / v_bar are read-only and shared
        return replace(self, indices=list(self.indices), dsigma=self.dsigma.copy())


@dataclass(frozen=True)
class InitSplit:
    """W = w_res + a0 b0 with a0 b0 holding the selected SVD components."""

    w_res: Matrix
    a0: Matrix
    b0: Matrix
    indices: List[int]


@dataclass
class AdapterState:
    """Per-layer adapter state for one of the four methods."""

    method: Method
    base: Matrix          # W (lora/dash) or W_res (init/tsd after split), frozen
    core: LoraCore
    dash: Optional[DashTerm] = None
    phase: Phase = "dash"
    pretrained: Optional[Matrix] = None  # original W, frozen
    init_indices: Optional[List[int]] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method {self.method!r}")
        if self.pretrained is None:
            self.pretrained = self.base
        if self.method == "lora" and (self.dash is not None or self.phase != "dash"):
            raise InvalidState("lora state carries no dash term")
        if self.method == "init" and self.dash is not None:
            raise InvalidState("init state carries no dash term")
        if self.method in ("dash", "tsd") and (self.dash is not None) != (self.phase == "dash"):
            raise InvalidState(f"{self.method} state must hold a dash term exactly in the dash phase")

    @property
    def rank(self) -> int:
        return self.core.rank

    def copy(self) -> "AdapterState":
        return replace(
            self,
            core=self.core.copy(),
            dash=self.dash.copy() if self.dash is not None else None,
            init_indices=list(self.init_indices) if self.init_indices is not None else None,
        )


def lora_random_init(n: int, m: int, r: int, alpha: float, seed: int) -> LoraCore:
    """
    Kaiming-uniform A (bound sqrt(6 / n)) and zero B.

    Args:
        n: Output dimension of the adapted weight
        m: Input dimension of the adapted weight
        r: LoRA rank, 1 <= r <= min(n, m)
        alpha: Scaling numerator
        seed: Seed of the generator drawing A

    Returns:
        LoraCore whose update is exactly zero
    """
    if not 1 <= r <= min(n, m):
        raise InvalidArgument(f"rank must lie in [1, {min(n, m)}], got {r}")
    if not alpha > 0:
        raise InvalidArgument(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / n)
    a = rng.uniform(-bound, bound, size=(n, r))
    return LoraCore(a=a, b=np.zeros((r, m)), alpha=float(alpha))


def ab_delta(state: AdapterState) -> Matrix:
    """Scaled LoRA update (alpha / r) A B."""
    core = state.core
    return core.scaling * (core.a @ core.b)


def dash_delta(state: AdapterState) -> Matrix:
    """Unscaled dash update sum_i dsigma_i u_bar_i v_bar_i^T (zero without a dash term)."""
    if state.dash is None:
        return np.zeros_like(state.base)
    d = state.dash
    return (d.u_bar * d.dsigma) @ d.v_bar.T


def effective_delta(state: AdapterState) -> Matrix:
    delta = ab_delta(state)
    if state.dash is not None:
        delta = delta + dash_delta(state)
    return delta


def merged_weight(state: AdapterState) -> Matrix:
    """Inference-time weight base + effective delta."""
    return state.base + effective_delta(state)


def current_delta(state: AdapterState) -> Matrix:
    """Update relative to the pretrained W, whatever the method's base is."""
    return merged_weight(state) - state.pretrained


def parameters(state: AdapterState) -> Dict[str, np.ndarray]:
    """Trainable arrays keyed by name; base and launched directions never appear."""
    params = {"a": state.core.a, "b": state.core.b}
    if state.dash is not None:
        params["dsigma"] = state.dash.dsigma
    return params


def _validate_indices(indices: Sequence[int], k: int, what: str) -> List[int]:
    idx = [int(i) for i in indices]
    if not idx:
        raise InvalidArgument(f"{what} needs at least one index")
    if len(set(idx)) != len(idx):
        raise InvalidArgument(f"{what} indices must be distinct, got {idx}")
    bad = [i for i in idx if not 0 <= i < k]
    if bad:
        raise InvalidArgument(f"{what} indices {bad} outside [0, {k})")
    return idx


def tsd_init_split(w: Matrix, f: SvdFactors, indices: Sequence[int]) -> InitSplit:
    """
    Move the selected SVD components of W into a LoRA pair.

    Args:
        w: Pretrained weight
        f: Factors of ``w``
        indices: Core directions moved into the adapter (r >= 1, distinct)

    Returns:
        InitSplit with a0 = U S^(1/2), b0 = S^(1/2) V^T and w_res = w - a0 b0
    """
    w = as_matrix(w, "w")
    idx = _validate_indices(indices, f.k, "init split")
    root = np.sqrt(f.sigma[idx])
    a0 = f.u[:, idx] * root
    b0 = root[:, None] * f.vt[idx]
    return InitSplit(w_res=_readonly(w - a0 @ b0), a0=a0, b0=b0, indices=idx)


def make_dash_term(f: SvdFactors, indices: Sequence[int]) -> DashTerm:
    """Launch the given directions with zero coordinate deltas."""
    idx = _validate_indices(indices, f.k, "dash")
    return DashTerm(
        indices=idx,
        dsigma=np.zeros(len(idx)),
        u_bar=_readonly(f.u[:, idx]),
        v_bar=_readonly(f.vt[idx].T),
    )


def new_state(
    method: Method,
    w: Matrix,
    rank: int,
    alpha: Optional[float] = None,
    seed: int = 0,
    f: Optional[SvdFactors] = None,
    init_indices: Optional[Sequence[int]] = None,
) -> AdapterState:
    """
    Fresh adapter state for ``method`` on the pretrained weight ``w``.

    lora starts in the dash phase, dash/tsd in the pre-launch phase. init is
    split immediately when ``init_indices`` (and ``f``) are given; otherwise
    it pre-launches like dash and is split at the phase switch.
    """
    w = _readonly(as_matrix(w, "w"))
    n, m = w.shape
    alpha = float(rank if alpha is None else alpha)
    if method not in METHODS:
        raise InvalidArgument(f"unknown method {method!r}")

    if method == "init" and init_indices is not None:
        if f is None:
            raise InvalidArgument("init split needs the factors of w")
        if not 1 <= rank <= min(n, m):
            raise InvalidArgument(f"rank must lie in [1, {min(n, m)}], got {rank}")
        if len(init_indices) != rank:
            raise InvalidArgument(f"init split needs {rank} indices, got {len(init_indices)}")
        split = tsd_init_split(w, f, init_indices)
        return AdapterState(
            method="init",
            base=split.w_res,
            core=LoraCore(a=split.a0.copy(), b=split.b0.copy(), alpha=alpha),
            phase="dash",
            pretrained=w,
            init_indices=split.indices,
        )

    core = lora_random_init(n, m, rank, alpha, seed)
    phase: Phase = "dash" if method == "lora" else "prelaunch"
    return AdapterState(method=method, base=w, core=core, phase=phase, pretrained=w)


def enter_dash_phase(
    state: AdapterState,
    f: SvdFactors,
    cr: ChangeRates,
    s_count: int = DEFAULT_DASH_COUNT,
    dash_indices: Optional[Sequence[int]] = None,
    init_indices: Optional[Sequence[int]] = None,
) -> AdapterState:
    """
    Switch a pre-launch state into its dash phase.

    dash: attaches a dash term on the launched directions, keeping A and B.
    tsd: additionally discards the pre-launch A, B and rebuilds base/core
    from the TSD split of the pretrained W on the top-r directions.
    init (pending split): rebuilds base/core from the split only.

    Args:
        state: Pre-launch state
        f: Factors of the pretrained W
        cr: Change rates of the pre-launch update
        s_count: Number of launched directions
        dash_indices: Explicit launched directions (defaults to top_k(cr, s_count))
        init_indices: Explicit split directions (defaults to top_k(cr, r))

    Returns:
        A new AdapterState in the dash phase; the input is left untouched
    """
    if state.method not in ("dash", "tsd", "init"):
        raise InvalidState(f"method {state.method!r} has no dash phase")
    if state.phase != "prelaunch":
        raise InvalidState(f"{state.method} state already left the pre-launch phase")

    dash = None
    if state.method in ("dash", "tsd"):
        if not 1 <= s_count <= f.k:
            raise InvalidArgument(f"s_count must lie in [1, {f.k}], got {s_count}")
        chosen = list(dash_indices) if dash_indices is not None else top_k(cr, s_count)
        dash = make_dash_term(f, chosen)

    if state.method == "dash":
        logger.debug("dash phase entered on directions %s", dash.indices)
        return AdapterState(
            method="dash", base=state.base, core=state.core.copy(), dash=dash,
            phase="dash", pretrained=state.pretrained,
        )

    rank = state.core.rank
    split_idx = list(init_indices) if init_indices is not None else top_k(cr, rank)
    if len(split_idx) != rank:
        raise InvalidArgument(f"init split needs {rank} indices, got {len(split_idx)}")
    split = tsd_init_split(state.pretrained, f, split_idx)
    logger.debug("%s split on directions %s, dash on %s", state.method, split.indices,
                 dash.indices if dash is not None else None)
    return AdapterState(
        method=state.method,
        base=split.w_res,
        core=LoraCore(a=split.a0.copy(), b=split.b0.copy(), alpha=state.core.alpha),
        dash=dash,
        phase="dash",
        pretrained=state.pretrained,
        init_indices=split.indices,
    )


def save_state(state: AdapterState, directory: str) -> None:
    """
    Serialize a state to ``directory``: meta.json plus TSDW matrices.

    Args:
        state: State to save
        directory: Target directory, created when missing
    """
    try:
        os.makedirs(directory, exist_ok=True)
        meta = {
            "method": state.method,
            "phase": state.phase,
            "r": state.rank,
            "s": state.dash.count if state.dash is not None else 0,
            "alpha": state.core.alpha,
            "indices": list(state.dash.indices) if state.dash is not None else [],
            "init_indices": list(state.init_indices or []),
        }
        with open(os.path.join(directory, "meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as e:
        raise ReportError(f"Failed to write adapter state to {directory}: {e}") from e

    write_tsdw(os.path.join(directory, "base.tsdw"), state.base)
    write_tsdw(os.path.join(directory, "a.tsdw"), state.core.a)
    write_tsdw(os.path.join(directory, "b.tsdw"), state.core.b)
    if state.dash is not None:
        write_tsdw(os.path.join(directory, "dsigma.tsdw"), state.dash.dsigma[None, :])
        write_tsdw(os.path.join(directory, "u_bar.tsdw"), state.dash.u_bar)
        write_tsdw(os.path.join(directory, "v_bar.tsdw"), state.dash.v_bar)
    if state.pretrained is not state.base and not np.array_equal(state.pretrained, state.base):
        write_tsdw(os.path.join(directory, "pretrained.tsdw"), state.pretrained)


def load_state(directory: str) -> AdapterState:
    """Inverse of save_state."""
    try:
        with open(os.path.join(directory, "meta.json")) as f:
            meta = json.load(f)
    except OSError as e:
        raise ReportError(f"Failed to read adapter state from {directory}: {e}") from e
    except ValueError as e:
        raise MatrixFormatError(f"{directory}/meta.json: {e}") from e

    def _load(name: str) -> np.ndarray:
        return read_tsdw(os.path.join(directory, name))

    base = _readonly(_load("base.tsdw"))
    pretrained_path = os.path.join(directory, "pretrained.tsdw")
    pretrained = _readonly(read_tsdw(pretrained_path)) if os.path.exists(pretrained_path) else base

    dash = None
    if meta.get("s", 0) > 0:
        dash = DashTerm(
            indices=[int(i) for i in meta["indices"]],
            dsigma=_load("dsigma.tsdw")[0].copy(),
            u_bar=_readonly(_load("u_bar.tsdw")),
            v_bar=_readonly(_load("v_bar.tsdw")),
        )
    return AdapterState(
        method=meta["method"],
        base=base,
        core=LoraCore(a=_load("a.tsdw"), b=_load("b.tsdw"), alpha=float(meta["alpha"])),
        dash=dash,
        phase=meta["phase"],
        pretrained=pretrained,
        init_indices=[int(i) for i in meta.get("init_indices", [])] or None,
    )
