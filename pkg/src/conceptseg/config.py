"""Run configuration: a flat key=value file format with CLI overrides.

Grammar, one entry per line:

    key = value          # trailing comments allowed
    # full-line comments and blank lines are ignored

Values are coerced by the declared field type: int, float, bool
("true"/"false"/"1"/"0"), str, or a comma list of ints for
``expandable_blocks``. CLI overrides take precedence over the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ParameterError, ValidationError

MODES = ("core", "finetune", "individual", "joint", "image_only_expansion",
         "no_cgc", "no_cde", "rand_concepts")


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "core"
    lam: float = 0.7
    tau_c: float = 0.7
    tau_i: float = 1.3
    rank: int = 8
    epochs: int = 40
    warmup_epochs: int = 3
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 20
    eval_batch: int = 64
    stream: str = "default12"
    stream_path: str = ""
    concepts_path: str = ""
    d_t: int = 32
    image_size: int = 32
    patch: int = 4
    channels: int = 2
    d: int = 32
    blocks: int = 4
    heads: int = 2
    mlp_hidden: int = 64
    use_pos: bool = True
    attn_temp: float = 3.0
    expandable_blocks: tuple[int, ...] = ()
    n_train: int = 200
    n_val: int = 30
    n_test: int = 60
    stats_epochs_fraction: float = 0.25
    router_calibration: float = 1.0
    bwt_form: str = "additive"
    out_dir: str = "runs"
    run_id: str = ""
    log_routing: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}; one of {MODES}")
        if not (0.0 < self.tau_c < 1.0):
            raise ParameterError(f"tau_c must lie in (0, 1), got {self.tau_c}")
        if not (self.tau_i > 0.0):
            raise ParameterError(f"tau_i must be positive, got {self.tau_i}")
        if not (0.0 <= self.lam <= 1.0):
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.rank < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("rank, epochs and batch_size must be >= 1")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ParameterError("warmup_epochs must lie in [0, epochs]")
        if not (0.0 < self.stats_epochs_fraction <= 1.0):
            raise ParameterError("stats_epochs_fraction must lie in (0, 1]")
        if self.bwt_form not in ("additive", "ratio"):
            raise ParameterError(f"unknown bwt_form {self.bwt_form!r}")
        if not self.expandable_blocks:
            self.expandable_blocks = (self.blocks - 2, self.blocks - 1)
        self.expandable_blocks = tuple(sorted(set(self.expandable_blocks)))
        for b in self.expandable_blocks:
            if not (0 <= b < self.blocks):
                raise ParameterError(
                    f"expandable block {b} outside [0, {self.blocks})")
        if not self.run_id:
            self.run_id = f"{self.mode}_s{self.seed}"

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.n_train, self.n_val, self.n_test)

    def effective_lam(self) -> float:
        return 0.0 if self.mode == "no_cgc" else self.lam

    def expansion_rule(self) -> str:
        if self.mode == "no_cde":
            return "always"
        if self.mode == "image_only_expansion":
            return "image_only"
        return "joint"


_LIST_FIELDS = {"expandable_blocks"}


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if name in _LIST_FIELDS:
        if not raw:
            return ()
        return tuple(int(x) for x in raw.split(","))
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValidationError(f"cannot parse boolean {name}={raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno} has no '=': {line!r}")
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def build_config(file_path: str | Path | None = None,
                 overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults < config file < overrides into a validated RunConfig."""
    raw: dict[str, str] = {}
    if file_path:
        raw.update(parse_config_text(Path(file_path).read_text(encoding="utf-8")))
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    kinds = {f.name: f.type for f in fields(RunConfig)}
    py_kinds = {"int": int, "float": float, "bool": bool, "str": str}
    kwargs = {}
    for key, value in raw.items():
        if key not in kinds:
            raise ValidationError(f"unknown config key {key!r}")
        kind = kinds[key]
        kind = py_kinds.get(kind, str) if isinstance(kind, str) else kind
        kwargs[key] = _coerce(key, kind, value)
    return RunConfig(**kwargs)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
