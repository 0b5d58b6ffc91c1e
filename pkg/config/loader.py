import os
from typing import Dict, Iterable, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from config.settings import Settings
from tsdlab.errors import ConfigError, ReportError
from tsdlab.harness import DirectionMode, ExperimentConfig, InitMode, MethodName
from tsdlab.models import TaskSpec, TrainConfig

LIST_KEYS = (
    "planted_indices", "planted_coeffs", "methods", "direction_modes",
    "init_modes", "t_sweep", "s_sweep", "seeds",
)
OPTIONAL_KEYS = ("weight_scale", "alpha", "state_dir", "w_path", "w_star_path", "w_star_b_path", "results_dir")

# one set of defaults: the domain models own them
_TASK = TaskSpec.model_fields
_TRAIN = TrainConfig.model_fields
_GRID = ExperimentConfig.model_fields


class RunConfig(BaseModel):
    """Every key a config file or --set override may name."""

    model_config = ConfigDict(extra="forbid")

    # Task
    kind: Literal["planted_linear", "planted_mlp"] = _TASK["kind"].default
    n: int = _TASK["n"].default
    m: int = _TASK["m"].default
    planted_indices: List[int] = Field(default_factory=list)
    planted_coeffs: List[float] = Field(default_factory=list)
    plant_count: int = _TASK["plant_count"].default
    plant_region: Literal["any", "lower", "upper"] = _TASK["plant_region"].default
    coeff_low: float = _TASK["coeff_low"].default
    coeff_high: float = _TASK["coeff_high"].default
    weight_scale: Optional[float] = None
    noise_std: float = _TASK["noise_std"].default
    n_train: int = _TASK["n_train"].default
    n_val: int = _TASK["n_val"].default

    # Training
    method: Literal["lora", "dash", "init", "tsd"] = "tsd"
    rank: int = _GRID["rank"].default
    alpha: Optional[float] = None
    lr: float = _TRAIN["lr"].default
    steps: int = _TRAIN["steps"].default
    batch: int = _TRAIN["batch"].default
    optimizer: Literal["sgd", "adam"] = _TRAIN["optimizer"].default
    t_prelaunch: int = _TRAIN["t_prelaunch"].default
    s_dash: int = _TRAIN["s_dash"].default
    record_every: int = _TRAIN["record_every"].default
    seed: int = 0

    # Experiment grid
    methods: List[MethodName] = Field(default_factory=lambda: ["lora", "tsd"])
    direction_modes: List[DirectionMode] = Field(default_factory=lambda: ["tsd"])
    init_modes: List[InitMode] = Field(default_factory=lambda: ["tsd"])
    t_sweep: List[int] = Field(default_factory=list)
    s_sweep: List[int] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=list)
    truth_source: Literal["planted", "full_ft"] = "planted"
    epsilon: float = Field(default_factory=lambda: Settings().epsilon, gt=0)

    # Paths
    out_dir: str = Field(default_factory=lambda: Settings().out_dir)
    state_dir: Optional[str] = None
    w_path: Optional[str] = None
    w_star_path: Optional[str] = None
    # optimal weight of a second task on the same W, for the task-specificity comparison
    w_star_b_path: Optional[str] = None
    results_dir: Optional[str] = None

    @field_validator(*LIST_KEYS, mode="before")
    @classmethod
    def split_list(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator(*OPTIONAL_KEYS, mode="before")
    @classmethod
    def empty_is_none(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            return None
        return value

    def task_spec(self, seed: Optional[int] = None) -> TaskSpec:
        return TaskSpec(
            kind=self.kind, n=self.n, m=self.m,
            planted_indices=self.planted_indices, planted_coeffs=self.planted_coeffs,
            plant_count=self.plant_count, plant_region=self.plant_region,
            coeff_low=self.coeff_low, coeff_high=self.coeff_high,
            weight_scale=self.weight_scale, noise_std=self.noise_std,
            n_train=self.n_train, n_val=self.n_val,
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, steps=self.steps, batch=self.batch, optimizer=self.optimizer,
            t_prelaunch=self.t_prelaunch, s_dash=self.s_dash,
            record_every=self.record_every,
            seed=self.seed if seed is None else seed,
        )

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            task=self.task_spec(), train=self.train_config(),
            methods=self.methods, direction_modes=self.direction_modes,
            init_modes=self.init_modes, t_sweep=self.t_sweep, s_sweep=self.s_sweep,
            seeds=self.seeds or [self.seed], rank=self.rank, alpha=self.alpha,
            truth_source=self.truth_source, epsilon=self.epsilon, out_dir=self.out_dir,
        )


KNOWN_KEYS = frozenset(RunConfig.model_fields)


def _split_pair(raw: str, source: str, line: int, known: Optional[Iterable[str]]) -> tuple:
    if "=" not in raw:
        raise ConfigError(f"expected key=value, got {raw!r}", line=line, source=source)
    key, value = raw.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("empty key", line=line, source=source)
    if known is not None and key not in known:
        raise ConfigError(f"unknown key {key!r}", line=line, source=source)
    return key, value.strip()


Origins = Dict[str, Tuple[str, Optional[int]]]


def parse_kv_text(
    text: str,
    source: str = "<config>",
    known: Optional[Iterable[str]] = KNOWN_KEYS,
    origins: Optional[Origins] = None,
) -> Dict[str, str]:
    """
    Parse flat key=value text.

    One pair per line; blank lines and lines starting with '#' are skipped.
    A repeated key keeps its last value.

    Args:
        text: File contents
        source: Name used in error messages
        known: Accepted keys (None accepts any)
        origins: Filled with (source, line) of every kept key when given

    Returns:
        Raw string values keyed by name
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, value = _split_pair(stripped, source, number, known)
        values[key] = value
        if origins is not None:
            origins[key] = (source, number)
    return values


def load_kv_file(path: str, known: Optional[Iterable[str]] = KNOWN_KEYS,
                 origins: Optional[Origins] = None) -> Dict[str, str]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ReportError(f"Failed to read config {path}: {e}") from e
    return parse_kv_text(text, source=path, known=known, origins=origins)


def parse_overrides(pairs: Iterable[str], known: Optional[Iterable[str]] = KNOWN_KEYS,
                    origins: Optional[Origins] = None) -> Dict[str, str]:
    """--set key=value pairs; position is reported as the line number."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(pairs, start=1):
        key, value = _split_pair(raw, "--set", number, known)
        values[key] = value
        if origins is not None:
            origins[key] = ("--set", number)
    return values


def resolve_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    flags: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """
    Merge defaults, the config file, --set overrides and dedicated flags,
    later sources winning.

    Raises:
        ConfigError: A value fails validation; carries the source and line
            that supplied it
    """
    raw: Dict[str, str] = {}
    origins: Origins = {}
    if path:
        raw.update(load_kv_file(path, origins=origins))
    raw.update(parse_overrides(overrides, origins=origins))
    for key, value in (flags or {}).items():
        if value is not None:
            raw[key] = value
            origins[key] = ("command line", None)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else ""
        source, line = origins.get(key, (None, None))
        raise ConfigError(f"invalid value for {key!r}: {first['msg']}", line=line, source=source) from e


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def dump_effective_config(cfg: RunConfig, path: str) -> None:
    """Write every resolved value as sorted key=value lines."""
    lines = [f"{key}={_format(value)}" for key, value in sorted(cfg.model_dump().items())]
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise ReportError(f"Failed to write effective config {path}: {e}") from e
