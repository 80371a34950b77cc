"""Template banks, scaler sets and materialization of target weights.

A :class:`TemplateBank` holds three families of square ``t x t`` templates:
``att``, ``proj`` and ``mlp``.  The ``mlp`` family serves both MLP weights of
every block (``mlp1`` and ``mlp2``) through differently shaped scalers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import IncompatibleError, InputError, ShapeError
from .kron import compose_weight
from .vit import TEMPLATED, ModelConfig, ModelParams, templated_shape, weight_name

FAMILIES = ("att", "proj", "mlp")
STORAGE_DTYPE = np.float32
INIT_STD = 0.02


def family_of(component: str) -> str:
    return "mlp" if component in ("mlp1", "mlp2") else component


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within ``bound`` std."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


@dataclass
class TemplateBank:
    t: int
    templates: dict[str, np.ndarray]  # family -> (n, t, t)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t < 1:
            raise InputError(f"template size must be >= 1, got {self.t}")
        if set(self.templates) != set(FAMILIES):
            raise InputError(f"bank needs families {FAMILIES}, got {sorted(self.templates)}")
        fixed = {}
        for fam in FAMILIES:
            arr = np.asarray(self.templates[fam])
            if arr.ndim != 3 or arr.shape[0] < 1:
                raise ShapeError(f"{fam} templates must be a nonempty (n, t, t) stack, got {arr.shape}")
            if arr.shape[1] != arr.shape[2]:
                raise ShapeError(f"{fam} templates must be square, got {arr.shape[1]}x{arr.shape[2]}")
            if arr.shape[1] != self.t:
                raise ShapeError(f"{fam} templates are {arr.shape[1]}x{arr.shape[2]}, bank size is {self.t}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{fam} templates contain non-finite values")
            fixed[fam] = np.ascontiguousarray(arr, dtype=STORAGE_DTYPE)
        self.templates = fixed

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(self.templates[f].shape[0] for f in FAMILIES)

    def digest(self) -> str:
        """SHA-256 over template size and payload bytes."""
        h = hashlib.sha256(str(self.t).encode())
        for fam in FAMILIES:
            h.update(fam.encode())
            h.update(self.templates[fam].tobytes())
        return h.hexdigest()

    def copy(self) -> "TemplateBank":
        return TemplateBank(self.t, {f: a.copy() for f, a in self.templates.items()}, dict(self.metadata))


@dataclass
class ScalerSet:
    config: ModelConfig
    t: int
    scalers: dict[str, np.ndarray]  # weight name -> (n, s1, s2)

    def param_count(self) -> int:
        return int(sum(a.size for a in self.scalers.values()))

    def copy(self) -> "ScalerSet":
        return ScalerSet(self.config, self.t, {k: a.copy() for k, a in self.scalers.items()})


def bank_init(t: int, counts=(4, 4, 4), seed: int = 0) -> TemplateBank:
    """Random bank, truncated normal (std 0.02, cut at 2 std)."""
    if t < 1:
        raise InputError(f"template size must be >= 1, got {t}")
    if len(counts) != 3 or min(counts) < 1:
        raise InputError(f"counts must be three positive ints, got {counts}")
    rng = np.random.default_rng(seed)
    templates = {fam: trunc_normal(rng, (n, t, t)) for fam, n in zip(FAMILIES, counts)}
    return TemplateBank(t, templates, {"seed": seed, "provenance": {"source": "random"}})


def scaler_shapes(bank: TemplateBank | int, config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Scaler shape per templated component, identical for every layer."""
    t = bank if isinstance(bank, int) else bank.t
    dims = {
        "embed_dim": config.embed_dim,
        "3*embed_dim": 3 * config.embed_dim,
        "mlp_hidden": config.mlp_hidden,
    }
    for name, value in dims.items():
        if value % t:
            raise IncompatibleError(f"template size t={t} does not divide {name}={value}")
    out = {}
    for comp in TEMPLATED:
        rows, cols = templated_shape(config, comp)
        out[comp] = (rows // t, cols // t)
    return out


def check_compatible(bank: TemplateBank, scalers: ScalerSet) -> None:
    shapes = scaler_shapes(bank, scalers.config)
    counts = dict(zip(FAMILIES, bank.counts))
    for l in range(scalers.config.depth):
        for comp in TEMPLATED:
            name = weight_name(l, comp)
            if name not in scalers.scalers:
                raise IncompatibleError(f"scaler set is missing {name}")
            want = (counts[family_of(comp)], *shapes[comp])
            got = scalers.scalers[name].shape
            if tuple(got) != want:
                raise IncompatibleError(f"{name}: scaler stack {tuple(got)} incompatible with bank, need {want}")


def scalers_init(bank: TemplateBank, config: ModelConfig, seed: int = 0) -> ScalerSet:
    """Normal scalers with std ``1 / (n * sqrt(s1 * s2))``, ``n`` the family's template count."""
    shapes = scaler_shapes(bank, config)
    counts = dict(zip(FAMILIES, bank.counts))
    rng = np.random.default_rng(seed)
    scalers = {}
    for l in range(config.depth):
        for comp in TEMPLATED:
            s1, s2 = shapes[comp]
            n = counts[family_of(comp)]
            std = 1.0 / (n * np.sqrt(s1 * s2))
            scalers[weight_name(l, comp)] = (rng.standard_normal((n, s1, s2)) * std).astype(STORAGE_DTYPE)
    return ScalerSet(config, bank.t, scalers)


def materialize(bank: TemplateBank, scalers: ScalerSet, components=TEMPLATED) -> ModelParams:
    """Templated weights ``sum_i T_i (x) S_i`` (float64) for every layer."""
    check_compatible(bank, scalers)
    out = {}
    for l in range(scalers.config.depth):
        for comp in components:
            name = weight_name(l, comp)
            out[name] = compose_weight(bank.templates[family_of(comp)], scalers.scalers[name])
    return out


def transferred_param_count(bank: TemplateBank) -> int:
    return sum(bank.counts) * bank.t * bank.t


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_bank(bank: TemplateBank, path) -> None:
    meta = {
        "template_size": bank.t,
        "counts": list(bank.counts),
        "metadata": bank.metadata,
    }
    container.write(path, "bank", {f: bank.templates[f] for f in FAMILIES}, meta)


def load_bank(path) -> TemplateBank:
    meta, tensors = container.read(path, expect_kind="bank")
    return TemplateBank(int(meta["template_size"]), tensors, meta.get("metadata", {}))


def save_scalers(scalers: ScalerSet, path, meta: dict | None = None) -> None:
    m = {"config": scalers.config.to_dict(), "template_size": scalers.t}
    m.update(meta or {})
    container.write(path, "scalers", scalers.scalers, m)


def load_scalers(path) -> ScalerSet:
    meta, tensors = container.read(path, expect_kind="scalers")
    return ScalerSet(ModelConfig.from_dict(meta["config"]), int(meta["template_size"]), tensors)


def save_checkpoint(params: ModelParams, config: ModelConfig, path, meta: dict | None = None) -> None:
    m = {"config": config.to_dict()}
    m.update(meta or {})
    container.write(path, "checkpoint", params, m)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    from .vit import check_params

    meta, tensors = container.read(path, expect_kind="checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    check_params(tensors, config)
    return tensors, config, meta
