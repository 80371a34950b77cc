"""Experiment harness: depth and width sweeps, component ablation, CSV reports."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import learngene
from .data import Dataset, load_dataset  # noqa: F401  (re-exported)
from .errors import IncompatibleError, InputError, WaveError
from .learngene import STORAGE_DTYPE, TemplateBank, materialize, scaler_shapes, transferred_param_count
from .lifecycle import DecompressConfig, TrainBudget, fit_scalers, he_init, initialize_target, train_model
from .vit import COMPONENT_GROUPS, ModelConfig, ModelParams, param_shapes, weight_name

log = logging.getLogger(__name__)

METHODS = ("wave", "he_init", "direct_pt")
AXES = ("depth", "width", "components")
REPORT_HEADER = (
    "run_id,method,depth,width,components_mask,seed,epoch,split,top1,params_transferred,wall_time"
)
ABLATION_COMPONENTS = ("att", "proj", "fc")


@dataclass
class MetricsRow:
    run_id: str
    method: str
    depth: int
    width: int
    components_mask: str
    seed: int
    epoch: int
    split: str
    top1: float
    params_transferred: int
    wall_time: float

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 100.0:
            raise InputError(f"top1 must lie in [0, 100], got {self.top1}")


@dataclass
class Budgets:
    train_epochs: int = 1
    direct_pt_epochs: int = 3
    fit_iterations: int = 300
    fit_subset_size: int = 512
    batch_size: int = 32
    lr: float = 1e-3
    fit_lr: float = 1e-3
    weight_decay: float = 0.05


@dataclass
class ExperimentSpec:
    axis: str
    grid: list[ModelConfig]
    seeds: list[int]
    methods: list[str] = field(default_factory=lambda: ["wave", "he_init"])
    budgets: Budgets = field(default_factory=Budgets)
    bank: TemplateBank | str | None = None
    masks: list[str] = field(default_factory=list)  # components axis only, e.g. "att+fc", ""
    record_wall_time: bool = True

    def __post_init__(self):
        if self.axis not in AXES:
            raise InputError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.grid:
            raise InputError("experiment grid is empty")
        if not self.seeds:
            raise InputError("experiment needs at least one seed")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise InputError(f"unknown methods {sorted(bad)}")
        needs_bank = "wave" in self.methods or self.axis == "components"
        if needs_bank and self.bank is None:
            raise InputError("wave runs require a template bank")
        for m in self.masks:
            parse_mask(m)

    def resolve_bank(self) -> TemplateBank | None:
        if isinstance(self.bank, (str, Path)):
            self.bank = learngene.load_bank(self.bank)
        return self.bank


def parse_mask(mask: str) -> tuple[str, ...]:
    parts = tuple(p for p in mask.replace(",", "+").split("+") if p)
    bad = set(parts) - set(ABLATION_COMPONENTS)
    if bad:
        raise InputError(f"unknown mask components {sorted(bad)}; choose from {ABLATION_COMPONENTS}")
    return tuple(c for c in ABLATION_COMPONENTS if c in parts)


def mask_name(parts) -> str:
    return "+".join(parts) if parts else "none"


def _row_template(run_id, method, cfg, mask, seed, transferred):
    return dict(run_id=run_id, method=method, depth=cfg.depth, width=cfg.embed_dim,
                components_mask=mask, seed=seed, params_transferred=transferred)


def _run_cell(method: str, cfg: ModelConfig, seed: int, dataset: Dataset, spec: ExperimentSpec,
              bank: TemplateBank | None, mask: tuple[str, ...] | None, run_id: str) -> list[MetricsRow]:
    b = spec.budgets
    start = time.perf_counter()
    transferred = 0
    epochs = b.train_epochs
    if method == "he_init":
        params = he_init(cfg, seed)
    elif method == "direct_pt":
        params = he_init(cfg, seed)
        epochs = b.direct_pt_epochs
    elif method == "wave":
        comps = ("att", "proj", "mlp1", "mlp2")
        if mask is not None:
            comps = tuple(c for g in mask for c in COMPONENT_GROUPS[g])
        if mask is not None and not comps:
            params = he_init(cfg, seed)
        else:
            dcfg = DecompressConfig(cfg, b.fit_iterations, b.fit_subset_size, b.batch_size, b.fit_lr, seed)
            fitted, _ = fit_scalers(bank, dcfg, dataset)
            transferred = transferred_param_count(bank)
            if mask is None:
                params = initialize_target(bank, fitted, seed)
            else:
                params = he_init(cfg, seed)
                for name, w in materialize(bank, fitted, comps).items():
                    params[name] = w.astype(STORAGE_DTYPE)
    else:
        raise InputError(f"unknown method {method!r}")
    budget = TrainBudget(epochs, b.batch_size, b.lr, b.weight_decay, seed)
    _, trace = train_model(params, cfg, dataset, budget)
    wall = time.perf_counter() - start if spec.record_wall_time else 0.0
    if mask is not None:
        label = mask_name(mask)
    else:
        label = "all" if method == "wave" else "none"
    base = _row_template(run_id, method, cfg, label, seed, transferred)
    return [MetricsRow(**base, epoch=e["epoch"], split="val", top1=e["val_top1"], wall_time=wall)
            for e in trace.epochs]


def _error_row(run_id, method, cfg, mask, seed, exc) -> MetricsRow:
    log.warning("cell %s failed: %s", run_id, exc)
    return MetricsRow(**_row_template(run_id, method, cfg, mask, seed, 0),
                      epoch=0, split="error", top1=0.0, wall_time=0.0)


def _cells(spec: ExperimentSpec):
    if spec.axis == "components":
        cfg = spec.grid[0]
        for mask in spec.masks:
            parts = parse_mask(mask)
            for seed in spec.seeds:
                yield ("wave", cfg, seed, parts,
                       f"components-{mask_name(parts)}-d{cfg.depth}-w{cfg.embed_dim}-s{seed}")
        return
    for cfg in spec.grid:
        for method in spec.methods:
            for seed in spec.seeds:
                yield (method, cfg, seed, None,
                       f"{spec.axis}-{method}-d{cfg.depth}-w{cfg.embed_dim}-s{seed}")


def _run_one(args):
    method, cfg, seed, mask, run_id, dataset, spec, bank = args
    try:
        return _run_cell(method, cfg, seed, dataset, spec, bank, mask, run_id)
    except WaveError as exc:
        m = mask_name(mask) if mask is not None else "none"
        return [_error_row(run_id, method, cfg, m, seed, exc)]


def _run(spec: ExperimentSpec, dataset: Dataset, jobs: int = 1) -> list[MetricsRow]:
    bank = spec.resolve_bank()
    work = [(*cell, dataset, spec, bank) for cell in _cells(spec)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    rows = [r for cell in results for r in cell]
    return sort_rows(rows)


def validate_grid(spec: ExperimentSpec) -> None:
    """Reject configurations the bank cannot build before any training starts."""
    bank = spec.resolve_bank()
    if bank is None:
        return
    for cfg in spec.grid:
        scaler_shapes(bank, cfg)


def run_depth_sweep(spec: ExperimentSpec, dataset: Dataset, jobs: int = 1) -> list[MetricsRow]:
    if spec.axis != "depth":
        raise InputError(f"run_depth_sweep needs axis 'depth', got {spec.axis!r}")
    validate_grid(spec)
    return _run(spec, dataset, jobs)


def run_width_sweep(spec: ExperimentSpec, dataset: Dataset, jobs: int = 1) -> list[MetricsRow]:
    if spec.axis != "width":
        raise InputError(f"run_width_sweep needs axis 'width', got {spec.axis!r}")
    bank = spec.resolve_bank()
    for cfg in spec.grid:
        if bank is not None and cfg.embed_dim % bank.t:
            raise IncompatibleError(
                f"width={cfg.embed_dim} is not a multiple of the template size t={bank.t}"
            )
    validate_grid(spec)
    return _run(spec, dataset, jobs)


def run_component_ablation(spec: ExperimentSpec, dataset: Dataset, jobs: int = 1) -> list[MetricsRow]:
    if spec.axis != "components":
        raise InputError(f"run_component_ablation needs axis 'components', got {spec.axis!r}")
    if not spec.masks:
        raise InputError("ablation needs at least one mask")
    validate_grid(spec)
    return _run(spec, dataset, jobs)


def width_grid(base: ModelConfig, widths, head_dim: int | None = None) -> list[ModelConfig]:
    """Configs at the given widths, keeping depth, head dim and MLP ratio fixed."""
    head_dim = head_dim or base.head_dim
    out = []
    for w in widths:
        if w % head_dim:
            raise IncompatibleError(f"width={w} is not a multiple of head_dim={head_dim}")
        out.append(base.replace(embed_dim=w, heads=w // head_dim))
    return out


def depth_grid(base: ModelConfig, depths) -> list[ModelConfig]:
    return [base.replace(depth=d) for d in depths]


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def sort_rows(rows: list[MetricsRow]) -> list[MetricsRow]:
    return sorted(rows, key=lambda r: (r.run_id, r.epoch))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_report(rows: list[MetricsRow]) -> str:
    if not rows:
        raise InputError("report needs at least one row")
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(MetricsRow)]
    for row in sort_rows(rows):
        w.writerow([_fmt(getattr(row, n)) for n in names])
    return buf.getvalue()


def write_report(rows: list[MetricsRow], path) -> None:
    from .container import atomic_write_bytes

    try:
        atomic_write_bytes(path, format_report(rows).encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def read_report(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        types = {f.name: f.type for f in fields(MetricsRow)}
        rows = []
        for rec in reader:
            kw = {}
            for name, value in rec.items():
                t = types[name]
                kw[name] = int(value) if t == "int" else float(value) if t == "float" else value
            rows.append(MetricsRow(**kw))
    return rows


def mean_top1(rows: list[MetricsRow], **match) -> float:
    """Mean final-epoch val top-1 over rows matching the given field values."""
    last: dict[str, MetricsRow] = {}
    for r in rows:
        if r.split != "val" or any(getattr(r, k) != v for k, v in match.items()):
            continue
        if r.run_id not in last or r.epoch > last[r.run_id].epoch:
            last[r.run_id] = r
    if not last:
        raise InputError(f"no val rows match {match}")
    return float(np.mean([r.top1 for r in last.values()]))
