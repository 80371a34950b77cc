"""Command-line pipeline: teach -> condense -> init -> train -> eval, plus sweep and ablate.

Exit codes: 0 success, 2 input/validation error, 3 shape incompatibility,
4 training divergence, 5 I/O or format error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import secrets
import sys
import time
from pathlib import Path

from . import __version__, bench, learngene, lifecycle
from .container import atomic_write_bytes, dumps_json, file_sha256
from .data import load_dataset
from .errors import FormatError, IncompatibleError, InputError, ShapeError, TrainingError, WaveError
from .vit import ModelConfig

log = logging.getLogger("wavelg")

EXIT_OK, EXIT_INPUT, EXIT_SHAPE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5

DEFAULT_CONFIG = {
    "seed": None,
    "dataset": {"kind": "synthetic", "classes": 8, "samples": 1600, "seed": 0},
    "model": {"depth": 2, "embed_dim": 32, "heads": 2, "patch_size": 4, "image_size": 16,
              "channels": 1, "classes": 8},
    "bank": {"t": 32, "counts": [4, 4, 4]},
    "condense": {"aux": {"depth": 6, "embed_dim": 32, "heads": 2}, "epochs": 3, "batch_size": 32,
                 "lr": 1e-3, "temperature": 1.0, "weight_decay": 0.05},
    "decompress": {"fit_iterations": 300, "fit_subset_size": 512, "batch_size": 32, "lr": 1e-3},
    "train": {"epochs": 1, "batch_size": 32, "lr": 1e-3, "weight_decay": 0.05},
    "output": {"dir": "runs"},
}
# sections whose inner keys are free-form (validated by their consumers)
_OPEN_SECTIONS = {"dataset"}
_OPTIONAL_MODEL_KEYS = {"mlp_hidden"}


class ConfigError(InputError):
    pass


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            allowed_model = path in ("model.", "condense.aux.") and key in (
                set(ModelConfig.__dataclass_fields__) | _OPTIONAL_MODEL_KEYS
            )
            if not allowed_model:
                raise ConfigError(f"unknown config key {where!r}")
            out[key] = value
        elif isinstance(base[key], dict) and path.rstrip(".") not in _OPEN_SECTIONS and key not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge_strict(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return _merge_strict(DEFAULT_CONFIG, user)


def _model_config(section: dict, base: dict | None = None) -> ModelConfig:
    merged = dict(base or {})
    merged.update(section)
    return ModelConfig.from_dict(merged)


def _validate_dataset_paths(source: dict) -> None:
    if source.get("kind") == "idx":
        for key in ("images", "labels"):
            if key in source and not Path(source[key]).is_file():
                raise ConfigError(f"dataset file not found: {source[key]}")


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


class Run:
    """Per-command state: resolved config, seed, output dir, and the manifest it writes."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.config = load_config(args.config)
        if args.out:
            self.config["output"]["dir"] = args.out
        seed = args.seed if args.seed is not None else self.config.get("seed")
        if seed is None:
            seed = secrets.randbelow(2**31)
            log.warning("no --seed given; using random seed %d (recorded in the manifest)", seed)
        self.seed = int(seed)
        self.config["seed"] = self.seed
        self.out = Path(self.config["output"]["dir"])
        self.artifacts: dict[str, str] = {}
        self.extra: dict = {}
        self.start = time.perf_counter()
        _validate_dataset_paths(self.config["dataset"])

    def dataset(self):
        return load_dataset(self.config["dataset"])

    def record(self, name: str, path: Path) -> None:
        self.artifacts[name] = file_sha256(path)

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "config": self.config,
            "seed": self.seed,
            "hash_algorithm": "sha256",
            "artifacts": self.artifacts,
            "wall_time": time.perf_counter() - self.start,
            "tool_version": __version__,
        }
        manifest.update(self.extra)
        atomic_write_bytes(self.out / f"{self.command}_manifest.json",
                           json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n")


def _write_trace(run: Run, trace, name: str) -> None:
    path = run.out / name
    run.out.mkdir(parents=True, exist_ok=True)
    lifecycle.write_trace(trace, path)
    run.record(name, path)


def _train_budget(cfg: dict, seed: int, epochs: int | None = None) -> lifecycle.TrainBudget:
    t = cfg["train"]
    return lifecycle.TrainBudget(epochs if epochs is not None else t["epochs"], t["batch_size"],
                                 t["lr"], t["weight_decay"], seed)


def _with_size(cfg: ModelConfig, depth: int | None, width: int | None) -> ModelConfig:
    changes = {}
    if depth is not None:
        changes["depth"] = depth
    if width is not None:
        if width % cfg.head_dim:
            raise IncompatibleError(f"width={width} is not a multiple of head_dim={cfg.head_dim}")
        changes.update(embed_dim=width, heads=width // cfg.head_dim)
    return cfg.replace(**changes) if changes else cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_teach(args) -> int:
    run = Run("teach", args)
    cfg = _with_size(_model_config(run.config["model"]), args.depth, args.width)
    budget = _train_budget(run.config, run.seed, args.epochs)
    ds = run.dataset()
    params, trace, metrics = lifecycle.train_teacher(cfg, ds, budget)
    path = run.out / "teacher.wlg"
    learngene.save_checkpoint(params, cfg, path, {"role": "teacher", "metrics": metrics, "seed": run.seed})
    run.record("teacher.wlg", path)
    _write_trace(run, trace, "teacher_trace.csv")
    run.extra["metrics"] = metrics
    run.finish()
    print(f"teacher val top-1 {metrics['val_top1']:.2f}%  -> {path}")
    return EXIT_OK


def cmd_condense(args) -> int:
    run = Run("condense", args)
    teacher_path = _require_file(args.teacher, "teacher")
    c = run.config["condense"]
    aux = _model_config(c["aux"], base=run.config["model"])
    bcfg = run.config["bank"]
    bank = learngene.bank_init(int(bcfg["t"]), tuple(bcfg["counts"]), run.seed)
    learngene.scaler_shapes(bank, aux)
    teacher, tcfg, _ = learngene.load_checkpoint(teacher_path)
    ccfg = lifecycle.CondenseConfig(aux, args.epochs or c["epochs"], c["batch_size"], c["lr"],
                                    c["temperature"], c["weight_decay"], run.seed)
    ds = run.dataset()
    teacher_hash = file_sha256(teacher_path)
    result = lifecycle.condense(bank, teacher, tcfg, ccfg, ds, teacher_id=teacher_hash)
    path = run.out / "bank.wlg"
    learngene.save_bank(result.bank, path)
    run.record("bank.wlg", path)
    _write_trace(run, result.trace, "condense_trace.csv")
    run.extra["teacher_sha256"] = teacher_hash
    run.finish()
    print(f"bank t={result.bank.t} counts={result.bank.counts} "
          f"({learngene.transferred_param_count(result.bank)} params) -> {path}")
    return EXIT_OK


def cmd_init(args) -> int:
    run = Run("init", args)
    bank_path = _require_file(args.bank, "bank")
    bank = learngene.load_bank(bank_path)
    base = _model_config(run.config["model"])
    width = args.width if args.width is not None else base.embed_dim
    if width % bank.t:
        raise IncompatibleError(
            f"width={width} is not a multiple of the bank template size t={bank.t}; "
            f"every templated weight must tile into t x t blocks"
        )
    target = _with_size(base, args.depth, args.width)
    learngene.scaler_shapes(bank, target)
    d = run.config["decompress"]
    iters = args.fit_iters if args.fit_iters is not None else d["fit_iterations"]
    dcfg = lifecycle.DecompressConfig(target, iters, d["fit_subset_size"], d["batch_size"], d["lr"], run.seed)
    before = file_sha256(bank_path)
    ds = run.dataset()
    fitted, trace = lifecycle.fit_scalers(bank, dcfg, ds)
    params = lifecycle.initialize_target(bank, fitted, run.seed)
    if file_sha256(bank_path) != before:
        raise FormatError(f"bank file {bank_path} changed during scaler fitting")
    ckpt = run.out / "init.wlg"
    learngene.save_checkpoint(params, target, ckpt,
                              {"role": "wave_init", "bank_sha256": before, "fit_iterations": iters})
    scal = run.out / "scalers.wlg"
    learngene.save_scalers(fitted, scal, {"bank_sha256": before})
    run.record("init.wlg", ckpt)
    run.record("scalers.wlg", scal)
    _write_trace(run, trace, "fit_trace.csv")
    run.extra["bank_sha256"] = before
    run.finish()
    print(f"initialized depth={target.depth} width={target.embed_dim} "
          f"({fitted.param_count()} scaler params, {iters} fit iterations) -> {ckpt}")
    return EXIT_OK


def _metrics_rows(run_id, method, cfg, seed, epochs_rows, wall):
    return [bench.MetricsRow(run_id, method, cfg.depth, cfg.embed_dim, "none", seed, e["epoch"], "val",
                             e["val_top1"], 0, wall) for e in epochs_rows]


def cmd_train(args) -> int:
    run = Run("train", args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    params, cfg, meta = learngene.load_checkpoint(ckpt)
    ds = run.dataset()
    params, trace = lifecycle.train_model(params, cfg, ds, _train_budget(run.config, run.seed, args.epochs))
    path = run.out / "trained.wlg"
    learngene.save_checkpoint(params, cfg, path, {"role": "trained", "parent_sha256": file_sha256(ckpt)})
    run.record("trained.wlg", path)
    _write_trace(run, trace, "train_trace.csv")
    if trace.epochs:
        wall = 0.0 if args.threads == 1 else time.perf_counter() - run.start
        rows = _metrics_rows(f"train-{ckpt.stem}", meta.get("role", "model"), cfg, run.seed, trace.epochs, wall)
        report = run.out / "train_metrics.csv"
        bench.write_report(rows, report)
        run.record("train_metrics.csv", report)
        print(f"val top-1 after {len(trace.epochs)} epoch(s): {trace.epochs[-1]['val_top1']:.2f}%")
    run.finish()
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Run("eval", args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    params, cfg, meta = learngene.load_checkpoint(ckpt)
    ds = run.dataset()
    top1 = lifecycle.evaluate(params, cfg, ds.val_x, ds.val_y)
    row = bench.MetricsRow(f"eval-{ckpt.stem}", meta.get("role", "model"), cfg.depth, cfg.embed_dim,
                           "none", run.seed, 0, "val", top1, 0, 0.0)
    path = run.out / "eval.csv"
    bench.write_report([row], path)
    run.record("eval.csv", path)
    run.extra["top1"] = top1
    run.finish()
    print(f"top-1 {top1:.2f}%")
    return EXIT_OK


_SPEC_KEYS = {"axis", "methods", "base_model", "depths", "widths", "head_dim", "masks", "seeds",
              "budgets", "bank", "dataset"}


def load_experiment(path: str, run: Run, axis_default: str) -> tuple[bench.ExperimentSpec, dict]:
    p = _require_file(path, "spec")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    axis = raw.get("axis", axis_default)
    base = _model_config(raw.get("base_model", {}), base=run.config["model"])
    if axis == "depth":
        grid = bench.depth_grid(base, raw.get("depths", [base.depth]))
    elif axis == "width":
        grid = bench.width_grid(base, raw.get("widths", [base.embed_dim]), raw.get("head_dim"))
    else:
        grid = [base]
    budget_keys = set(bench.Budgets.__dataclass_fields__)
    bad = set(raw.get("budgets", {})) - budget_keys
    if bad:
        raise ConfigError(f"unknown budget keys: {sorted(bad)}")
    bank = raw.get("bank")
    if bank is not None:
        bank = str(_require_file(bank, "bank"))
    if "dataset" in raw:
        _validate_dataset_paths(raw["dataset"])
        run.config["dataset"] = raw["dataset"]
    spec = bench.ExperimentSpec(
        axis=axis,
        grid=grid,
        seeds=list(raw.get("seeds", [run.seed])),
        methods=list(raw.get("methods", ["wave", "he_init"])),
        budgets=bench.Budgets(**raw.get("budgets", {})),
        bank=bank,
        masks=list(raw.get("masks", [])),
        record_wall_time=args_threads_nondeterministic(run.args),
    )
    return spec, raw


def args_threads_nondeterministic(args) -> bool:
    # --threads 1 is the bit-exact mode: wall time is kept out of the CSV
    return args.threads != 1


def _run_experiment(args, command: str, axis_default: str) -> int:
    run = Run(command, args)
    spec, raw = load_experiment(args.spec, run, axis_default)
    run.extra["experiment"] = raw
    ds = run.dataset()
    if spec.axis == "depth":
        rows = bench.run_depth_sweep(spec, ds, args.jobs)
    elif spec.axis == "width":
        rows = bench.run_width_sweep(spec, ds, args.jobs)
    else:
        rows = bench.run_component_ablation(spec, ds, args.jobs)
    path = run.out / f"{command}_report.csv"
    bench.write_report(rows, path)
    run.record(path.name, path)
    if spec.bank is not None:
        run.extra["bank_sha256"] = file_sha256(raw["bank"])
    run.finish()
    print(f"{len(rows)} rows -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    return _run_experiment(args, "sweep", "depth")


def cmd_ablate(args) -> int:
    return _run_experiment(args, "ablate", "components")


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--seed", type=int, help="random seed (random and recorded if omitted)")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--jobs", type=int, default=1, help="parallel grid cells for sweep/ablate")
    shared.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is bit-exact mode")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wavelg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("teach", parents=[shared], help="train the ancestry (teacher) model")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_teach)

    p = sub.add_parser("condense", parents=[shared], help="distill a teacher into a template bank")
    p.add_argument("--teacher", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_condense)

    p = sub.add_parser("init", parents=[shared], help="fit scalers and initialize a target model")
    p.add_argument("--bank", required=True)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--fit-iters", type=int, dest="fit_iters")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", parents=[shared], help="train a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint (val top-1)")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("sweep", cmd_sweep, "depth/width sweep"),
                              ("ablate", cmd_ablate, "component ablation")):
        p = sub.add_parser(name, parents=[shared], help=help_)
        p.add_argument("--spec", required=True, help="JSON experiment spec")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1 or args.jobs < 1:
        print("error: --threads and --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except IncompatibleError as exc:
        print(f"error: incompatible shapes: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except ShapeError as exc:
        print(f"error: shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"error: format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InputError, WaveError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
