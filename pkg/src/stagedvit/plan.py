"""Experiment plans: the declarative grid definition and its TOML file format.

A plan file looks like::

    [grid]
    pretrain_sizes = [0, 2000]
    intermediate = "off"          # "on" | "off" | "both"
    finetune_sizes = [100, 400]
    runs_per_cell = 3
    seed = 7
    reseed = "all"                # "all" | "finetune_only"

    [datasets.pretrain]
    source = "synthetic"          # or a folder path (relative to $DATA_ROOT)
    kind = "unlabeled"
    size_limit = 2000             # synthetic: corpus size; folder: cap after load
    seed = 0

    [datasets.finetune]
    source = "synthetic"
    kind = "segmentation"
    size_limit = 700
    seed = 0

    [holdout]
    n_test = 200                  # default 1000
    seed = 42                     # default 42

    [phases.pretrain]             # any omitted key keeps the phase default
    epochs = 10
    batch_size = 64

    [output]
    save_final = false            # keep the fine-tuned checkpoint per cell

Phase keys: epochs, lr, weight_decay, gamma, milestones, batch_size,
mask_ratio, decay_all_params. ``[datasets.intermediate]`` is required only
when the grid enables the intermediate stage. Unknown keys are rejected so
typos surface as plan errors rather than silently ignored settings.

Run-level seeds are a pure function of (base seed, cell key, run index),
derived by hashing, so any cell can be reproduced in isolation. With
``reseed = "finetune_only"`` the pre-training and intermediate stages of
every run index share run 0's seeds (and therefore its cached
checkpoints); the default reseeds every stage per run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import tomli

from .data import KINDS, DatasetSpec
from .errors import PlanError
from .optim import PHASES, MilestoneSchedule, OptimConfig, PhaseConfig, default_phase_config

INTERMEDIATE_MODES = ("on", "off", "both")
RESEED_MODES = ("all", "finetune_only")


@dataclass(frozen=True)
class CellKey:
    pretrain_size: int
    intermediate: bool
    finetune_size: int
    run: int

    def __str__(self):
        mid = "int" if self.intermediate else "noint"
        return f"p{self.pretrain_size}-{mid}-f{self.finetune_size}-r{self.run}"

    @classmethod
    def parse(cls, text: str) -> "CellKey":
        try:
            p, mid, f, r = text.split("-")
            if not (p.startswith("p") and f.startswith("f") and r.startswith("r")):
                raise ValueError
            if mid not in ("int", "noint"):
                raise ValueError
            return cls(int(p[1:]), mid == "int", int(f[1:]), int(r[1:]))
        except ValueError:
            raise PlanError(f"bad cell key {text!r}; expected e.g. p2000-noint-f400-r0") from None


@dataclass(frozen=True)
class ExperimentPlan:
    pretrain_sizes: tuple
    intermediate: str
    finetune_sizes: tuple
    runs_per_cell: int
    seed: int = 0
    reseed: str = "all"
    phases: dict = field(default_factory=dict)  # phase name -> PhaseConfig
    datasets: dict = field(default_factory=dict)  # phase name -> DatasetSpec
    holdout_n: int = 1000
    holdout_seed: int = 42
    save_final: bool = False

    def __post_init__(self):
        if not self.pretrain_sizes:
            raise PlanError("grid.pretrain_sizes must not be empty")
        if any(s < 0 for s in self.pretrain_sizes):
            raise PlanError("grid.pretrain_sizes must be >= 0")
        if not self.finetune_sizes or any(s < 1 for s in self.finetune_sizes):
            raise PlanError("grid.finetune_sizes must be a non-empty list of sizes >= 1")
        if self.intermediate not in INTERMEDIATE_MODES:
            raise PlanError(f"grid.intermediate must be one of {INTERMEDIATE_MODES}")
        if self.runs_per_cell < 1:
            raise PlanError("grid.runs_per_cell must be >= 1")
        if self.reseed not in RESEED_MODES:
            raise PlanError(f"grid.reseed must be one of {RESEED_MODES}")
        for name in self.phases:
            if name not in PHASES:
                raise PlanError(f"phases.{name}: unknown phase (expected one of {PHASES})")
        needed = ["finetune"]
        if max(self.pretrain_sizes) > 0:
            needed.append("pretrain")
        if self.intermediate != "off":
            needed.append("intermediate")
        for name in needed:
            if name not in self.datasets:
                raise PlanError(f"datasets.{name} is required by this grid")
        if self.holdout_n < 1:
            raise PlanError("holdout.n_test must be >= 1")

    def phase_config(self, phase: str) -> PhaseConfig:
        return self.phases.get(phase) or default_phase_config(phase)

    def intermediate_levels(self):
        return {"on": (True,), "off": (False,), "both": (False, True)}[self.intermediate]

    def cells(self):
        """Every cell of the grid in canonical (deterministic) order."""
        out = []
        for p in sorted(self.pretrain_sizes):
            for inter in self.intermediate_levels():
                for f in sorted(self.finetune_sizes):
                    for run in range(self.runs_per_cell):
                        out.append(CellKey(p, inter, f, run))
        return out


def derive_seed(base: int, *parts) -> int:
    """Deterministic 32-bit seed from the base seed and any key parts."""
    text = ":".join(str(p) for p in (base, *parts))
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def pretrain_run(plan: ExperimentPlan, run: int) -> int:
    """Run index whose pre-train/intermediate seeds (and checkpoints) this run uses."""
    return run if plan.reseed == "all" else 0


def cell_seeds(plan: ExperimentPlan, cell: CellKey) -> dict:
    r_pre = pretrain_run(plan, cell.run)
    seeds = {}
    if cell.pretrain_size > 0:
        seeds["pretrain"] = derive_seed(plan.seed, "pretrain", cell.pretrain_size, r_pre)
        seeds["data_pretrain"] = derive_seed(plan.seed, "data.pretrain", cell.pretrain_size, r_pre)
    if cell.intermediate:
        seeds["intermediate"] = derive_seed(plan.seed, "intermediate", cell.pretrain_size, r_pre)
    # deliberately independent of pretrain_size: cells that differ only in
    # pre-training level fine-tune on the same subset in the same order
    seeds["finetune"] = derive_seed(
        plan.seed, "finetune", "int" if cell.intermediate else "noint", cell.finetune_size, cell.run
    )
    seeds["data_finetune"] = derive_seed(plan.seed, "data.finetune", cell.run)
    return seeds


def cell_config(plan: ExperimentPlan, cell: CellKey) -> dict:
    """Everything that determines this cell's result, as plain JSON data."""
    phases = ["finetune"]
    datasets = {"finetune": plan.datasets["finetune"]}
    if cell.pretrain_size > 0:
        phases.insert(0, "pretrain")
        datasets["pretrain"] = plan.datasets["pretrain"]
    if cell.intermediate:
        phases.insert(-1, "intermediate")
        datasets["intermediate"] = plan.datasets["intermediate"]
    return {
        "cell": asdict(cell),
        "seeds": cell_seeds(plan, cell),
        "phases": {name: asdict(plan.phase_config(name)) for name in phases},
        "datasets": {name: asdict(spec) for name, spec in datasets.items()},
        "holdout": [plan.holdout_n, plan.holdout_seed],
    }


def config_hash(plan: ExperimentPlan, cell: CellKey) -> str:
    canon = json.dumps(cell_config(plan, cell), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# TOML plan files


def _expect(table: dict, path: str, allowed: set):
    unknown = set(table) - allowed
    if unknown:
        raise PlanError(f"{path}: unknown key {sorted(unknown)[0]!r} (allowed: {sorted(allowed)})")


def _typed(table: dict, path: str, key: str, types, default=None, required=False):
    if key not in table:
        if required:
            raise PlanError(f"{path}.{key} is required")
        return default
    value = table[key]
    if types is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    bool_where_int = types is int and isinstance(value, bool)
    if not isinstance(value, types) or bool_where_int:
        raise PlanError(f"{path}.{key} has the wrong type ({type(value).__name__})")
    return value


def _int_list(table: dict, path: str, key: str, required=False):
    value = _typed(table, path, key, list, required=required)
    if value is None:
        return None
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise PlanError(f"{path}.{key} must be a list of integers")
    return tuple(value)


def _parse_phase(name: str, table: dict) -> PhaseConfig:
    path = f"phases.{name}"
    _expect(table, path, {"epochs", "lr", "weight_decay", "gamma", "milestones",
                          "batch_size", "mask_ratio", "decay_all_params"})
    base = default_phase_config(name)
    try:
        optim = OptimConfig(
            lr=_typed(table, path, "lr", float, base.optim.lr),
            weight_decay=_typed(table, path, "weight_decay", float, base.optim.weight_decay),
        )
        schedule = MilestoneSchedule(
            milestones=_int_list(table, path, "milestones") or base.schedule.milestones,
            gamma=_typed(table, path, "gamma", float, base.schedule.gamma),
        )
        return PhaseConfig(
            phase=name,
            epochs=_typed(table, path, "epochs", int, base.epochs),
            optim=optim,
            schedule=schedule,
            batch_size=_typed(table, path, "batch_size", int, base.batch_size),
            mask_ratio=_typed(table, path, "mask_ratio", float, base.mask_ratio),
            decay_all_params=_typed(table, path, "decay_all_params", bool, base.decay_all_params),
        )
    except ValueError as e:
        raise PlanError(f"{path}: {e}") from e


def _parse_dataset(name: str, table: dict) -> DatasetSpec:
    path = f"datasets.{name}"
    _expect(table, path, {"source", "kind", "size_limit", "seed"})
    expected_kind = {"pretrain": "unlabeled", "intermediate": "classification",
                     "finetune": "segmentation"}[name]
    kind = _typed(table, path, "kind", str, expected_kind)
    if kind != expected_kind:
        raise PlanError(f"{path}.kind must be {expected_kind!r} for the {name} phase")
    try:
        return DatasetSpec(
            source=_typed(table, path, "source", str, required=True),
            kind=kind,
            size_limit=_typed(table, path, "size_limit", int),
            seed=_typed(table, path, "seed", int, 0),
        )
    except ValueError as e:
        raise PlanError(f"{path}: {e}") from e


def parse_plan(text: str) -> ExperimentPlan:
    """Parse plan TOML; malformed input raises PlanError naming line or field."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise PlanError(f"plan is not valid TOML: {e}") from e
    _expect(doc, "plan", {"grid", "datasets", "phases", "holdout", "output"})
    grid = doc.get("grid")
    if not isinstance(grid, dict):
        raise PlanError("plan needs a [grid] table")
    _expect(grid, "grid", {"pretrain_sizes", "intermediate", "finetune_sizes",
                           "runs_per_cell", "seed", "reseed"})
    phases = {name: _parse_phase(name, table)
              for name, table in doc.get("phases", {}).items() if name in PHASES}
    for name in doc.get("phases", {}):
        if name not in PHASES:
            raise PlanError(f"phases.{name}: unknown phase (expected one of {PHASES})")
    datasets = {}
    for name, table in doc.get("datasets", {}).items():
        if name not in PHASES:
            raise PlanError(f"datasets.{name}: unknown phase (expected one of {PHASES})")
        datasets[name] = _parse_dataset(name, table)
    holdout = doc.get("holdout", {})
    _expect(holdout, "holdout", {"n_test", "seed"})
    output = doc.get("output", {})
    _expect(output, "output", {"save_final"})
    return ExperimentPlan(
        pretrain_sizes=_int_list(grid, "grid", "pretrain_sizes", required=True),
        intermediate=_typed(grid, "grid", "intermediate", str, "off"),
        finetune_sizes=_int_list(grid, "grid", "finetune_sizes", required=True),
        runs_per_cell=_typed(grid, "grid", "runs_per_cell", int, 1),
        seed=_typed(grid, "grid", "seed", int, 0),
        reseed=_typed(grid, "grid", "reseed", str, "all"),
        phases=phases,
        datasets=datasets,
        holdout_n=_typed(holdout, "holdout", "n_test", int, 1000),
        holdout_seed=_typed(holdout, "holdout", "seed", int, 42),
        save_final=_typed(output, "output", "save_final", bool, False),
    )


def load_plan(path) -> ExperimentPlan:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_plan(fh.read())
    except OSError as e:
        raise PlanError(f"cannot read plan file {path}: {e}") from e
