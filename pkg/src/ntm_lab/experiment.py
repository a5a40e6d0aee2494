"""Multi-run experiments: presets, config files, curve CSVs and median aggregation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .ntm import InitScheme, NtmConfig
from .tasks import TASKS, TaskConfig
from .training import CurvePoint, TrainConfig, Trainer

log = logging.getLogger(__name__)

CURVE_FIELDS = ["step", "run_id", "task", "model", "init_scheme", "seed", "val_loss", "val_bits_per_seq", "wall_ms"]
AGGREGATE_FIELDS = ["step", "median_val_bits_per_seq", "median_val_loss", "runs_alive"]
RUN_FIELDS = ["run_id", "seed", "status", "steps", "failure"]

PRESETS: dict[str, dict] = {
    "paper": dict(N=128, W=20, controller_units=100, lstm_units=256, lstm_layers=3, batch_size=32,
                  total_steps=100_000, eval_every=200, eval_examples=640),
    "desk": dict(N=32, W=12, controller_units=64, lstm_units=64, lstm_layers=2, batch_size=16,
                 total_steps=20_000, eval_every=200, eval_examples=640),
}

# task distributions per preset
PRESET_TASKS: dict[str, dict[str, dict]] = {
    "paper": {
        "copy": dict(bits=8, len_min=1, len_max=20),
        "repeat_copy": dict(bits=8, len_min=1, len_max=10, repeat_min=1, repeat_max=10),
        "associative_recall": dict(bits=6, items_min=2, items_max=6),
    },
    "desk": {
        "copy": dict(bits=4, len_min=1, len_max=5),
        "repeat_copy": dict(bits=4, len_min=1, len_max=5, repeat_min=1, repeat_max=5),
        "associative_recall": dict(bits=4, items_min=2, items_max=4),
    },
}


class SpecError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class ExperimentSpec:
    """Flat experiment description; ``None`` fields fall back to the preset."""

    task: str = "copy"
    model: str = "ntm"
    init_scheme: str | None = None
    num_runs: int = 10
    base_seed: int = 0
    preset: str = "paper"
    N: int | None = None
    W: int | None = None
    read_heads: int = 1
    write_heads: int = 1
    shift_range: int = 3
    controller_units: int | None = None
    controller_layers: int = 1
    clip_bound: float = 20.0
    clip_target: str = "projection"
    lstm_units: int | None = None
    lstm_layers: int | None = None
    bits: int | None = None
    len_min: int | None = None
    len_max: int | None = None
    repeat_min: int | None = None
    repeat_max: int | None = None
    items_min: int | None = None
    items_max: int | None = None
    learning_rate: float = 1e-3
    max_grad_norm: float = 50.0
    batch_size: int | None = None
    total_steps: int | None = None
    eval_every: int | None = None
    eval_examples: int | None = None
    stop_below: float | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise SpecError("task", f"must be one of {TASKS}, got {self.task!r}")
        if self.model not in ("ntm", "lstm"):
            raise SpecError("model", f"must be 'ntm' or 'lstm', got {self.model!r}")
        if self.preset not in PRESETS:
            raise SpecError("preset", f"must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.model == "ntm":
            if self.init_scheme is None:
                self.init_scheme = InitScheme.CONSTANT.value
            try:
                self.init_scheme = InitScheme(self.init_scheme).value
            except ValueError:
                raise SpecError("init_scheme", f"unknown scheme {self.init_scheme!r}") from None
        elif self.init_scheme is not None:
            raise SpecError("init_scheme", "only applies to model=ntm")
        if self.num_runs < 1:
            raise SpecError("num_runs", "must be >= 1")

    def resolved(self, name: str):
        value = getattr(self, name)
        if value is not None:
            return value
        preset = PRESETS[self.preset]
        if name in preset:
            return preset[name]
        return PRESET_TASKS[self.preset][self.task].get(name)

    def task_config(self, seed: int = 0) -> TaskConfig:
        base = TaskConfig.paper(self.task)
        r = self.resolved
        return TaskConfig(
            name=self.task,
            bits=r("bits") or base.bits,
            len_range=(r("len_min") or base.len_range[0], r("len_max") or base.len_range[1]),
            repeat_range=(r("repeat_min") or base.repeat_range[0], r("repeat_max") or base.repeat_range[1]),
            item_range=(r("items_min") or base.item_range[0], r("items_max") or base.item_range[1]),
            seed=seed,
        )

    def train_config(self, run: int) -> TrainConfig:
        seed = self.base_seed + run
        r = self.resolved
        try:
            ntm = NtmConfig(N=r("N"), W=r("W"), num_read_heads=self.read_heads, num_write_heads=self.write_heads,
                            shift_range=self.shift_range, init_scheme=self.init_scheme or "constant",
                            clip_bound=self.clip_bound, controller_units=r("controller_units"),
                            controller_layers=self.controller_layers, clip_target=self.clip_target)
            return TrainConfig(task=self.task_config(seed), model=self.model, ntm=ntm,
                               lstm_units=r("lstm_units"), lstm_layers=r("lstm_layers"),
                               learning_rate=self.learning_rate, max_grad_norm=self.max_grad_norm,
                               batch_size=r("batch_size"), total_steps=r("total_steps"),
                               eval_every=r("eval_every"), eval_examples=r("eval_examples"), seed=seed)
        except ValueError as exc:
            raise SpecError("config", str(exc)) from exc


SPEC_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentSpec)}
ALIASES = {"init": "init_scheme", "runs": "num_runs", "seed": "base_seed"}


def coerce(name: str, raw):
    """Convert a textual config value to the type of ExperimentSpec.<name>."""
    name = ALIASES.get(name, name)
    if name not in SPEC_FIELDS:
        raise SpecError(name, "unknown setting")
    if raw is None or not isinstance(raw, str):
        return name, raw
    if raw.strip().lower() in ("", "none"):
        return name, None
    kind = str(SPEC_FIELDS[name].type)
    try:
        if kind.startswith("int"):
            return name, int(raw)
        if kind.startswith("float"):
            return name, float(raw)
    except ValueError:
        raise SpecError(name, f"cannot parse {raw!r}") from None
    return name, raw.strip()


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        name, val = coerce(key.replace("-", "_"), value)
        out[name] = val
    return out


def build_spec(file_settings: dict | None = None, overrides: dict | None = None) -> ExperimentSpec:
    """Merge config-file settings with flag overrides (flags win)."""
    merged = {}
    for source in (file_settings or {}, overrides or {}):
        for k, v in source.items():
            name, val = coerce(k, v)
            merged[name] = val
    return ExperimentSpec(**merged)


# ---------------------------------------------------------------------------
# output files


def curve_row(point: CurvePoint, run_id: int, cfg: TrainConfig) -> dict:
    return {
        "step": point.step, "run_id": run_id, "task": cfg.task.name, "model": cfg.model,
        "init_scheme": cfg.ntm.init_scheme.value if cfg.model == "ntm" else "",
        "seed": cfg.seed, "val_loss": repr(point.val_loss),
        "val_bits_per_seq": repr(point.val_bits_per_seq), "wall_ms": point.wall_ms,
    }


class CurveWriter:
    """Appends one CSV row per curve point, flushing after each."""

    def __init__(self, path: Path, run_id: int, cfg: TrainConfig, keep_through: int | None = None):
        self.path, self.run_id, self.cfg = path, run_id, cfg
        rows = []
        if keep_through is not None and path.exists():
            rows = [r for r in read_csv(path) if int(r["step"]) <= keep_through]
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=CURVE_FIELDS)
        self.writer.writeheader()
        self.writer.writerows(rows)
        self.fh.flush()

    def __call__(self, point: CurvePoint):
        self.writer.writerow(curve_row(point, self.run_id, self.cfg))
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate_curves(curves: dict[int, list[dict]]) -> list[dict]:
    """Per-step medians over the runs that reported that step."""
    by_step: dict[int, list[dict]] = {}
    for rows in curves.values():
        for row in rows:
            by_step.setdefault(int(row["step"]), []).append(row)
    out = []
    for step in sorted(by_step):
        rows = by_step[step]
        out.append({
            "step": step,
            "median_val_bits_per_seq": statistics.median(float(r["val_bits_per_seq"]) for r in rows),
            "median_val_loss": statistics.median(float(r["val_loss"]) for r in rows),
            "runs_alive": len(rows),
        })
    return out


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunOutcome:
    run_id: int
    seed: int
    steps: int
    failure: dict | None
    curve_path: str
    checkpoint_path: str
    curve: list[CurvePoint] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failure is None


def run_single(spec: ExperimentSpec, run_id: int, out_dir, resume: bool = False) -> RunOutcome:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = spec.train_config(run_id)
    stem = f"run_{run_id:02d}"
    curve_path = out_dir / f"{stem}.csv"
    ckpt_path = out_dir / f"{stem}.ckpt"
    keep = None
    if resume and ckpt_path.exists():
        trainer = load_checkpoint(ckpt_path)
        keep = trainer.step
        log.info("run %d resumed at step %d", run_id, trainer.step)
    else:
        trainer = Trainer(cfg)
    writer = CurveWriter(curve_path, run_id, trainer.cfg, keep_through=keep)
    stop = None
    if spec.stop_below is not None:
        stop = lambda p: p.val_bits_per_seq < spec.stop_below  # noqa: E731
    try:
        every = spec.checkpoint_every
        while True:
            target = trainer.cfg.total_steps if not every else min(trainer.step + every, trainer.cfg.total_steps)
            before = len(trainer.curve)
            result = trainer.run(until=target, sink=writer, stop_when=stop)
            stopped = stop is not None and len(trainer.curve) > before and stop(trainer.curve[-1])
            if result.failure is not None or stopped or trainer.step >= trainer.cfg.total_steps:
                break
            save_checkpoint(trainer, ckpt_path)
    finally:
        writer.close()
    save_checkpoint(trainer, ckpt_path, extra={"failure": result.failure})
    return RunOutcome(run_id, trainer.cfg.seed, trainer.step, result.failure, str(curve_path),
                      str(ckpt_path), list(trainer.curve))


def _run_job(args):
    spec, run_id, out_dir, resume = args
    return run_single(spec, run_id, out_dir, resume)


def job_limit(requested: int | None) -> int:
    jobs = requested or 1
    cap = os.environ.get("NTM_LAB_THREADS")
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return max(1, jobs)


def run_experiment(spec: ExperimentSpec, out_dir, jobs: int | None = 1, resume: bool = False) -> list[RunOutcome]:
    """Train ``spec.num_runs`` seeds, then write the aggregate and run summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [(spec, i, out_dir, resume) for i in range(spec.num_runs)]
    n = job_limit(jobs)
    if n == 1:
        outcomes = [_run_job(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            outcomes = list(pool.map(_run_job, work))
    outcomes.sort(key=lambda o: o.run_id)
    curves = {o.run_id: read_csv(o.curve_path) for o in outcomes}
    write_csv(out_dir / "aggregate.csv", AGGREGATE_FIELDS, aggregate_curves(curves))
    write_csv(out_dir / "runs.csv", RUN_FIELDS, [
        {"run_id": o.run_id, "seed": o.seed, "status": "ok" if o.ok else "failed", "steps": o.steps,
         "failure": "" if o.ok else f"{o.failure['where']}:{o.failure['name']}@{o.failure['step']}"}
        for o in outcomes
    ])
    return outcomes


def steps_to_threshold(curve: list[CurvePoint], threshold: float) -> float:
    """First evaluated step whose bits-per-sequence is below ``threshold``; inf if never."""
    for p in curve:
        if p.val_bits_per_seq < threshold:
            return p.step
    return float("inf")
