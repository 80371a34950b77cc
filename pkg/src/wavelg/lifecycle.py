"""Training procedures: teacher training, knowledge condensation, scaler fitting.

Condensation distills a teacher into a template bank through an auxiliary
model whose templated weights are rebuilt from ``(templates, scalers)`` after
every optimizer step.  Decompression freezes the bank, fits fresh scalers for
a target configuration, and hands off a free-standing parameter set.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from .data import Dataset
from .errors import IncompatibleError, InputError, ShapeError, TrainingError
from .kron import grad_scalers, grad_templates
from .learngene import (
    FAMILIES,
    STORAGE_DTYPE,
    ScalerSet,
    TemplateBank,
    family_of,
    materialize,
    scaler_shapes,
    scalers_init,
    trunc_normal,
)
from .tensor_core import cross_entropy, cross_entropy_backward, kl_soft, kl_soft_backward
from .vit import (
    TEMPLATED,
    ModelConfig,
    ModelParams,
    backward_full,
    forward,
    is_templated,
    param_shapes,
    weight_name,
)

TRACE_FIELDS = ("step", "epoch", "loss_kl", "loss_ce", "loss_total", "top1")


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------

@dataclass
class TrainBudget:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InputError(f"invalid training budget {self}")


@dataclass
class CondenseConfig:
    aux: ModelConfig
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 1.0
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError(f"condensation needs epochs >= 1, got {self.epochs}")
        if not self.temperature > 0:
            raise InputError(f"temperature must be positive, got {self.temperature}")


@dataclass
class DecompressConfig:
    target: ModelConfig
    fit_iterations: int = 300
    fit_subset_size: int = 512
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.fit_iterations < 0:
            raise InputError(f"fit_iterations must be >= 0, got {self.fit_iterations}")
        if self.fit_subset_size < 1:
            raise InputError(f"fit_subset_size must be >= 1, got {self.fit_subset_size}")


@dataclass
class Trace:
    """Per-step loss rows plus per-epoch accuracy rows."""

    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def log_step(self, step, epoch, loss_kl, loss_ce, top1):
        self.steps.append({
            "step": step, "epoch": epoch, "loss_kl": loss_kl, "loss_ce": loss_ce,
            "loss_total": loss_kl + loss_ce, "top1": top1,
        })


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace.steps:
            w.writerow([row["step"], row["epoch"]] + [repr(float(row[k])) for k in TRACE_FIELDS[2:]])


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def _decays(name: str) -> bool:
    return name.endswith(".w") or name.startswith("template/")


class AdamW:
    """Adam with decoupled weight decay and cosine learning-rate decay.

    Updates the arrays in ``params`` in place (keeping their dtype); moment
    estimates are float64.  Iteration follows the dict order, so a fixed
    insertion order gives bit-identical runs.
    """

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, total_steps=1,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = params
        self.lr, self.total_steps = lr, max(1, total_steps)
        self.b1, self.b2 = betas
        self.eps, self.weight_decay = eps, weight_decay
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = cosine_lr(self.lr, self.t, self.total_steps)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p64 = p.astype(np.float64)
            if self.weight_decay and _decays(name):
                p64 *= 1.0 - lr * self.weight_decay
            p64 -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = p64


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def default_init(config: ModelConfig, seed: int) -> ModelParams:
    """Truncated-normal (std 0.02) for every field except norms (gamma=1, beta=0)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, STORAGE_DTYPE)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape, STORAGE_DTYPE)
        else:
            params[name] = trunc_normal(rng, shape).astype(STORAGE_DTYPE)
    return params


def he_init(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled normal (std sqrt(2/fan_in)) for every weight matrix.

    Biases are zero, norms are identity; class token and position embedding
    get a truncated normal with std 0.02.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, STORAGE_DTYPE)
        elif name.endswith(".beta") or name.endswith(".b"):
            params[name] = np.zeros(shape, STORAGE_DTYPE)
        elif name.endswith(".w"):
            std = np.sqrt(2.0 / shape[0])
            params[name] = (rng.standard_normal(shape) * std).astype(STORAGE_DTYPE)
        else:
            params[name] = trunc_normal(rng, shape).astype(STORAGE_DTYPE)
    return params


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _check_dataset(config: ModelConfig, dataset: Dataset) -> None:
    if (dataset.image_size, dataset.channels) != (config.image_size, config.channels):
        raise ShapeError(
            f"dataset images are {dataset.image_size}px x {dataset.channels}ch, "
            f"model expects {config.image_size}px x {config.channels}ch"
        )
    if dataset.classes != config.classes:
        raise ShapeError(f"dataset has {dataset.classes} classes, model has {config.classes}")


def _finite(loss: float, step: int, what: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"{what}: non-finite loss {loss}", step=step)


def evaluate(params: ModelParams, config: ModelConfig, images, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    correct = 0
    for i in range(0, len(images), batch_size):
        z = forward(images[i : i + batch_size], params, config)
        correct += int((z.argmax(axis=1) == labels[i : i + batch_size]).sum())
    return 100.0 * correct / len(images)


def _batch_top1(z, y) -> float:
    return 100.0 * float((z.argmax(axis=1) == y).mean())


# --------------------------------------------------------------------------
# supervised training
# --------------------------------------------------------------------------

def train_model(params: ModelParams, config: ModelConfig, dataset: Dataset,
                budget: TrainBudget) -> tuple[ModelParams, Trace]:
    """Plain cross-entropy training; one accuracy row per epoch."""
    _check_dataset(config, dataset)
    params = {k: np.array(v, dtype=STORAGE_DTYPE) for k, v in params.items()}
    trace = Trace()
    if budget.epochs == 0:
        return params, trace
    steps_per_epoch = math.ceil(len(dataset.train_x) / budget.batch_size)
    opt = AdamW(params, budget.lr, budget.epochs * steps_per_epoch, weight_decay=budget.weight_decay)
    rng = np.random.default_rng([budget.seed, 1])
    step = 0
    for epoch in range(budget.epochs):
        losses, correct = [], 0
        for idx in batches(len(dataset.train_x), budget.batch_size, rng):
            xb, yb = dataset.train_x[idx], dataset.train_y[idx]
            z, cache = forward(xb, params, config, cache=True)
            loss = cross_entropy(z, yb)
            _finite(loss, step, "train_model")
            grads = backward_full(cross_entropy_backward(z, yb), cache, params, config)
            opt.step(grads)
            trace.log_step(step, epoch, 0.0, loss, _batch_top1(z, yb))
            losses.append(loss * len(idx))
            correct += int((z.argmax(1) == yb).sum())
            step += 1
        trace.epochs.append({
            "epoch": epoch + 1,
            "train_loss": sum(losses) / len(dataset.train_x),
            "train_top1": 100.0 * correct / len(dataset.train_x),
            "val_top1": evaluate(params, config, dataset.val_x, dataset.val_y),
        })
    return params, trace


def train_teacher(config: ModelConfig, dataset: Dataset, budget: TrainBudget) -> tuple[ModelParams, Trace, dict]:
    """Directly trained ancestry model; returns params, trace and final accuracies."""
    _check_dataset(config, dataset)
    params = default_init(config, budget.seed)
    params, trace = train_model(params, config, dataset, budget)
    metrics = {
        "train_top1": evaluate(params, config, dataset.train_x, dataset.train_y),
        "val_top1": evaluate(params, config, dataset.val_x, dataset.val_y),
    }
    return params, trace, metrics


# --------------------------------------------------------------------------
# condensation
# --------------------------------------------------------------------------

def distill_loss(z_anc, z_aux, y, temperature: float = 1.0):
    """``KL(z_anc || z_aux) + CE(z_aux, y)``.

    Returns ``(loss, grad_wrt_z_aux, (kl, ce))``; the teacher logits get no gradient.
    """
    kl = kl_soft(z_anc, z_aux, temperature)
    ce = cross_entropy(z_aux, y)
    grad = kl_soft_backward(z_anc, z_aux, temperature) + cross_entropy_backward(z_aux, y)
    return kl + ce, grad, (kl, ce)


def factor_grads(weight_grads: dict[str, np.ndarray], bank: TemplateBank,
                 scalers: ScalerSet) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Map gradients of templated weights to template and scaler gradients.

    Template gradients are summed over every layer/component that uses the family.
    """
    gt = {fam: np.zeros(bank.templates[fam].shape) for fam in FAMILIES}
    gs = {}
    for l in range(scalers.config.depth):
        for comp in TEMPLATED:
            name = weight_name(l, comp)
            fam = family_of(comp)
            gw = weight_grads[name]
            gt[fam] += grad_templates(gw, scalers.scalers[name])
            gs[name] = grad_scalers(gw, bank.templates[fam])
    return gt, gs


@dataclass
class CondenseResult:
    bank: TemplateBank
    scalers: ScalerSet
    trace: Trace
    aux_params: ModelParams


def condense(bank: TemplateBank, teacher: ModelParams, teacher_config: ModelConfig,
             cfg: CondenseConfig, dataset: Dataset,
             on_step: Callable[[int, TemplateBank, ScalerSet, ModelParams], None] | None = None,
             teacher_id: str | None = None) -> CondenseResult:
    """Distill ``teacher`` into a copy of ``bank`` through an auxiliary model.

    ``on_step(step, bank, scalers, aux_params)`` is called after each optimizer
    step, once the auxiliary templated weights have been rebuilt.
    """
    aux = cfg.aux
    _check_dataset(aux, dataset)
    _check_dataset(teacher_config, dataset)
    scaler_shapes(bank, aux)  # shape errors before step 1
    bank = bank.copy()
    scalers = scalers_init(bank, aux, cfg.seed)
    aux_params = {k: v for k, v in default_init(aux, cfg.seed).items() if not is_templated(k)}
    aux_params.update(materialize(bank, scalers))

    opt_params: dict[str, np.ndarray] = {}
    for fam in FAMILIES:
        opt_params[f"template/{fam}"] = bank.templates[fam]
    for name, s in scalers.scalers.items():
        opt_params[f"scaler/{name}"] = s
    for name, p in aux_params.items():
        if not is_templated(name):
            opt_params[name] = p
    steps_per_epoch = math.ceil(len(dataset.train_x) / cfg.batch_size)
    opt = AdamW(opt_params, cfg.lr, cfg.epochs * steps_per_epoch, weight_decay=cfg.weight_decay)

    trace = Trace()
    rng = np.random.default_rng([cfg.seed, 2])
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(len(dataset.train_x), cfg.batch_size, rng):
            xb, yb = dataset.train_x[idx], dataset.train_y[idx]
            z_anc = forward(xb, teacher, teacher_config)
            z_aux, cache = forward(xb, aux_params, aux, cache=True)
            loss, dz, (kl, ce) = distill_loss(z_anc, z_aux, yb, cfg.temperature)
            _finite(loss, step, "condense")
            grads = backward_full(dz, cache, aux_params, aux)
            gt, gs = factor_grads(grads, bank, scalers)
            step_grads = {f"template/{f}": g for f, g in gt.items()}
            step_grads.update({f"scaler/{n}": g for n, g in gs.items()})
            step_grads.update({n: g for n, g in grads.items() if n in opt_params})
            opt.step(step_grads)
            aux_params.update(materialize(bank, scalers))
            trace.log_step(step, epoch, kl, ce, _batch_top1(z_aux, yb))
            if on_step is not None:
                on_step(step, bank, scalers, aux_params)
            step += 1
        trace.epochs.append({"epoch": epoch + 1, "val_top1": evaluate(aux_params, aux, dataset.val_x, dataset.val_y)})

    bank.metadata = {
        "seed": cfg.seed,
        "provenance": {
            "source": "condensed",
            "teacher": teacher_id,
            "epochs": cfg.epochs,
            "aux_config": aux.to_dict(),
            "temperature": cfg.temperature,
        },
    }
    return CondenseResult(bank, scalers, trace, aux_params)


# --------------------------------------------------------------------------
# decompression
# --------------------------------------------------------------------------

def fit_scalers(bank: TemplateBank, cfg: DecompressConfig, dataset: Dataset) -> tuple[ScalerSet, Trace]:
    """Fit fresh scalers for ``cfg.target`` with every template frozen.

    The non-templated parameters are randomly initialized and trained along
    with the scalers, then discarded.
    """
    target = cfg.target
    _check_dataset(target, dataset)
    scalers = scalers_init(bank, target, cfg.seed)
    trace = Trace()
    if cfg.fit_iterations == 0:
        return scalers, trace
    free = {k: v for k, v in he_init(target, cfg.seed).items() if not is_templated(k)}
    params = dict(free)
    params.update(materialize(bank, scalers))

    opt_params = {f"scaler/{n}": s for n, s in scalers.scalers.items()}
    opt_params.update(free)
    opt = AdamW(opt_params, cfg.lr, cfg.fit_iterations, weight_decay=0.0)

    rng = np.random.default_rng([cfg.seed, 3])
    n_sub = min(cfg.fit_subset_size, len(dataset.train_x))
    subset = np.sort(rng.permutation(len(dataset.train_x))[:n_sub])
    step, epoch = 0, 0
    while step < cfg.fit_iterations:
        for idx in batches(n_sub, cfg.batch_size, rng):
            if step >= cfg.fit_iterations:
                break
            rows = subset[idx]
            xb, yb = dataset.train_x[rows], dataset.train_y[rows]
            z, cache = forward(xb, params, target, cache=True)
            loss = cross_entropy(z, yb)
            _finite(loss, step, "fit_scalers")
            grads = backward_full(cross_entropy_backward(z, yb), cache, params, target)
            step_grads = {}
            for l in range(target.depth):
                for comp in TEMPLATED:
                    name = weight_name(l, comp)
                    step_grads[f"scaler/{name}"] = grad_scalers(grads[name], bank.templates[family_of(comp)])
            step_grads.update({n: g for n, g in grads.items() if n in free})
            opt.step(step_grads)
            params.update(materialize(bank, scalers))
            trace.log_step(step, epoch, 0.0, loss, _batch_top1(z, yb))
            step += 1
        epoch += 1
    return scalers, trace


def initialize_target(bank: TemplateBank, fitted: ScalerSet, seed: int = 0) -> ModelParams:
    """Templated weights from the bank; every other field freshly initialized.

    The non-templated fields come from :func:`he_init`, so a WAVE model and a
    He-initialized model with the same seed differ only in templated weights.
    """
    params = he_init(fitted.config, seed)
    for name, w in materialize(bank, fitted).items():
        params[name] = w.astype(STORAGE_DTYPE)
    return params
