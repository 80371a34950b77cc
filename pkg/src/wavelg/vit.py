"""A small pre-norm Vision Transformer with hand-written backward pass.

Parameters live in a flat ``dict[str, ndarray]`` whose keys follow
:func:`param_shapes`.  The four templated weights of block ``l`` are
``blocks.{l}.att.w`` (fused QKV, ``D x 3D``), ``blocks.{l}.proj.w``,
``blocks.{l}.mlp1.w`` and ``blocks.{l}.mlp2.w``; everything else (embeddings,
norms, biases, head) is never built from templates.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import InputError, ShapeError, StateError
from .tensor_core import GELU, LayerNorm, Linear, MatMul, Softmax, as_f64

TEMPLATED = ("att", "proj", "mlp1", "mlp2")
# ablation-level component names -> weight components
COMPONENT_GROUPS = {"att": ("att",), "proj": ("proj",), "fc": ("mlp1", "mlp2")}

ModelParams = dict  # name -> ndarray


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    embed_dim: int = 32
    heads: int = 2
    mlp_hidden: int | None = None  # defaults to 4 * embed_dim
    patch_size: int = 4
    image_size: int = 16
    channels: int = 1
    classes: int = 4

    def __post_init__(self):
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        for name in ("embed_dim", "heads", "mlp_hidden", "patch_size", "image_size", "channels", "classes"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 0:
            raise InputError(f"depth must be >= 0, got {self.depth}")
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim={self.embed_dim} is not a multiple of heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ShapeError(
                f"patch_size={self.patch_size} does not divide image_size={self.image_size}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        if "embed_dim" in changes and "mlp_hidden" not in changes:
            # keep the MLP ratio when only the width changes
            ratio = self.mlp_hidden // self.embed_dim
            changes["mlp_hidden"] = ratio * changes["embed_dim"]
        d.update(changes)
        return ModelConfig(**d)


def templated_shape(config: ModelConfig, component: str) -> tuple[int, int]:
    D, Dh = config.embed_dim, config.mlp_hidden
    return {
        "att": (D, 3 * D),
        "proj": (D, D),
        "mlp1": (D, Dh),
        "mlp2": (Dh, D),
    }[component]


def weight_name(layer: int, component: str) -> str:
    return f"blocks.{layer}.{component}.w"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (config.patch_dim, D),
        "patch_embed.b": (D,),
        "cls_token": (1, D),
        "pos_embed": (config.tokens, D),
    }
    for l in range(config.depth):
        p = f"blocks.{l}."
        shapes[p + "norm1.gamma"] = (D,)
        shapes[p + "norm1.beta"] = (D,)
        shapes[p + "att.w"] = templated_shape(config, "att")
        shapes[p + "att.b"] = (3 * D,)
        shapes[p + "proj.w"] = templated_shape(config, "proj")
        shapes[p + "proj.b"] = (D,)
        shapes[p + "norm2.gamma"] = (D,)
        shapes[p + "norm2.beta"] = (D,)
        shapes[p + "mlp1.w"] = templated_shape(config, "mlp1")
        shapes[p + "mlp1.b"] = (config.mlp_hidden,)
        shapes[p + "mlp2.w"] = templated_shape(config, "mlp2")
        shapes[p + "mlp2.b"] = (D,)
    shapes["norm.gamma"] = (D,)
    shapes["norm.beta"] = (D,)
    shapes["head.w"] = (D, config.classes)
    shapes["head.b"] = (config.classes,)
    return shapes


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ShapeError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        if not np.all(np.isfinite(params[name])):
            raise InputError(f"{name} has non-finite entries")


def is_templated(name: str) -> bool:
    parts = name.split(".")
    return len(parts) == 4 and parts[0] == "blocks" and parts[2] in TEMPLATED and parts[3] == "w"


def _expand_components(components) -> set[str]:
    if components is None or components == "all":
        return {"all"}
    if isinstance(components, str):
        components = [components]
    out: set[str] = set()
    for c in components:
        if c == "templated":
            out.update(TEMPLATED)
        elif c in COMPONENT_GROUPS:
            out.update(COMPONENT_GROUPS[c])
        elif c in TEMPLATED or c == "all":
            out.add(c)
        else:
            raise InputError(f"unknown component selector {c!r}")
    return out


def param_count(config: ModelConfig, components: Iterable[str] | str | None = None) -> int:
    """Closed-form parameter count.

    ``components`` may be ``None``/``"all"`` (every parameter), ``"templated"``,
    or any mix of ``att``, ``proj``, ``mlp1``, ``mlp2`` and ``fc``.
    """
    sel = _expand_components(components)
    D, Dh, L = config.embed_dim, config.mlp_hidden, config.depth
    per_layer = {"att": 3 * D * D, "proj": D * D, "mlp1": D * Dh, "mlp2": Dh * D}
    if "all" in sel:
        per_block = sum(per_layer.values()) + 3 * D + D + Dh + D + 4 * D
        rest = config.patch_dim * D + D + D + config.tokens * D + 2 * D + D * config.classes + config.classes
        return L * per_block + rest
    return L * sum(per_layer[c] for c in sel)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def patchify(images, config: ModelConfig) -> np.ndarray:
    """``(B, H, W, C)`` images -> ``(B, N, p*p*C)`` patches, row-major over the patch grid."""
    x = as_f64(images)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise ShapeError(f"images must be (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    if (H, W, C) != (config.image_size, config.image_size, config.channels):
        raise ShapeError(
            f"image shape {(H, W, C)} does not match config "
            f"{(config.image_size, config.image_size, config.channels)}"
        )
    p, g = config.patch_size, config.image_size // config.patch_size
    x = x.reshape(B, g, p, g, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, p * p * C)


def unpatchify(patches: np.ndarray, config: ModelConfig) -> np.ndarray:
    B = patches.shape[0]
    p, g, C = config.patch_size, config.image_size // config.patch_size, config.channels
    x = patches.reshape(B, g, g, p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * p, g * p, C)


def layer_params(params: ModelParams, layer: int) -> dict[str, np.ndarray]:
    """Short-keyed view (``att.w``, ``norm1.gamma``, ...) of one block's parameters."""
    prefix = f"blocks.{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


class _Embed:
    def __init__(self):
        self.lin = Linear()

    def forward(self, patches, params):
        e = self.lin.forward(patches, params["patch_embed.w"], params["patch_embed.b"])
        B = e.shape[0]
        cls = np.broadcast_to(as_f64(params["cls_token"]), (B, 1, e.shape[-1]))
        return np.concatenate([cls, e], axis=1) + as_f64(params["pos_embed"])

    def backward(self, g):
        dcls = g[:, :1, :].sum(axis=0)
        dpos = g.sum(axis=0)
        dpatch, dw, db = self.lin.backward(g[:, 1:, :])
        return dpatch, {"patch_embed.w": dw, "patch_embed.b": db, "cls_token": dcls, "pos_embed": dpos}


class _Attention:
    def __init__(self, config: ModelConfig):
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.qkv = Linear()
        self.scores = MatMul()
        self.softmax = Softmax()
        self.mix = MatMul()
        self.proj = Linear()
        self.probs = None

    def forward(self, x, lp):
        B, T, D = x.shape
        H, d = self.heads, self.head_dim
        qkv = self.qkv.forward(x, lp["att.w"], lp["att.b"])
        qkv = qkv.reshape(B, T, 3, H, d).transpose(2, 0, 3, 1, 4)  # (3, B, H, T, d)
        q, k, v = qkv[0], qkv[1], qkv[2]
        s = self.scores.forward(q, np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
        p = self.softmax.forward(s)
        self.probs = p
        o = self.mix.forward(p, v)
        o = o.transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj.forward(o, lp["proj.w"], lp["proj.b"])

    def backward(self, g):
        B, T, D = g.shape
        H, d = self.heads, self.head_dim
        do, dwp, dbp = self.proj.backward(g)
        do = do.reshape(B, T, H, d).transpose(0, 2, 1, 3)
        dp, dv = self.mix.backward(do)
        (ds,) = self.softmax.backward(dp)
        ds = ds * (1.0 / math.sqrt(d))
        dq, dkt = self.scores.backward(ds)
        dk = np.swapaxes(dkt, -1, -2)
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, T, 3 * D)
        dx, dwqkv, dbqkv = self.qkv.backward(dqkv)
        return dx, {"att.w": dwqkv, "att.b": dbqkv, "proj.w": dwp, "proj.b": dbp}


class _MLP:
    def __init__(self):
        self.fc1 = Linear()
        self.act = GELU()
        self.fc2 = Linear()

    def forward(self, x, lp):
        h = self.fc1.forward(x, lp["mlp1.w"], lp["mlp1.b"])
        return self.fc2.forward(self.act.forward(h), lp["mlp2.w"], lp["mlp2.b"])

    def backward(self, g):
        dh, dw2, db2 = self.fc2.backward(g)
        (dh,) = self.act.backward(dh)
        dx, dw1, db1 = self.fc1.backward(dh)
        return dx, {"mlp1.w": dw1, "mlp1.b": db1, "mlp2.w": dw2, "mlp2.b": db2}


class _Block:
    def __init__(self, config: ModelConfig):
        self.norm1 = LayerNorm()
        self.attn = _Attention(config)
        self.norm2 = LayerNorm()
        self.mlp = _MLP()

    def forward(self, x, lp):
        x = x + self.attn.forward(self.norm1.forward(x, lp["norm1.gamma"], lp["norm1.beta"]), lp)
        return x + self.mlp.forward(self.norm2.forward(x, lp["norm2.gamma"], lp["norm2.beta"]), lp)

    def backward(self, g):
        dh, grads = self.mlp.backward(g)
        dx2, dg2, db2 = self.norm2.backward(dh)
        g = g + dx2
        dh, agrads = self.attn.backward(g)
        dx1, dg1, db1 = self.norm1.backward(dh)
        grads.update(agrads)
        grads.update({"norm1.gamma": dg1, "norm1.beta": db1, "norm2.gamma": dg2, "norm2.beta": db2})
        return g + dx1, grads


@dataclass
class ForwardCache:
    """Intermediates recorded by :func:`forward` for :func:`backward_full`."""

    config: ModelConfig
    batch: int
    embed: _Embed
    blocks: list = field(default_factory=list)
    final_norm: LayerNorm | None = None
    head: Linear | None = None

    def attention_probs(self) -> list[np.ndarray]:
        return [b.attn.probs for b in self.blocks]


def msa_forward(x, lp: dict, config: ModelConfig) -> np.ndarray:
    """Multi-head self-attention of one block on a ``(T, D)`` or ``(B, T, D)`` input."""
    x = as_f64(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[-1] != config.embed_dim:
        raise ShapeError(f"msa input width {x.shape[-1]} != embed_dim {config.embed_dim}")
    out = _Attention(config).forward(x, lp)
    return out[0] if squeeze else out


def mlp_forward(x, lp: dict) -> np.ndarray:
    """``GELU(x W1 + b1) W2 + b2``."""
    return _MLP().forward(as_f64(x), lp)


def patchify_embed(image, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Token matrix ``(N+1, D)`` for a single ``(H, W, C)`` image."""
    img = as_f64(image)
    if img.ndim == 2:
        img = img[..., None]
    return _Embed().forward(patchify(img[None], config), params)[0]


def forward(images, params: ModelParams, config: ModelConfig, cache: bool = False):
    """Logits ``(B, classes)``; with ``cache=True`` returns ``(logits, ForwardCache)``."""
    patches = patchify(images, config)
    fc = ForwardCache(config=config, batch=patches.shape[0], embed=_Embed())
    x = fc.embed.forward(patches, params)
    for l in range(config.depth):
        blk = _Block(config)
        x = blk.forward(x, layer_params(params, l))
        fc.blocks.append(blk)
    fc.final_norm = LayerNorm()
    h = fc.final_norm.forward(x, params["norm.gamma"], params["norm.beta"])
    fc.head = Linear()
    logits = fc.head.forward(h[:, 0, :], params["head.w"], params["head.b"])
    return (logits, fc) if cache else logits


def backward_full(loss_grad, fc: ForwardCache | None, params: ModelParams, config: ModelConfig):
    """Gradients for every parameter, plus the input images under key ``"images"``."""
    if fc is None or fc.head is None:
        raise StateError("backward_full needs the cache from forward(..., cache=True)")
    g = as_f64(loss_grad)
    if g.shape != (fc.batch, config.classes):
        raise ShapeError(f"loss grad {g.shape} does not match logits {(fc.batch, config.classes)}")
    grads: dict[str, np.ndarray] = {}
    dcls, grads["head.w"], grads["head.b"] = fc.head.backward(g)
    dh = np.zeros((fc.batch, config.tokens, config.embed_dim))
    dh[:, 0, :] = dcls
    dx, grads["norm.gamma"], grads["norm.beta"] = fc.final_norm.backward(dh)
    for l in reversed(range(config.depth)):
        dx, bg = fc.blocks[l].backward(dx)
        grads.update({f"blocks.{l}.{k}": v for k, v in bg.items()})
    dpatch, eg = fc.embed.backward(dx)
    grads.update(eg)
    grads["images"] = unpatchify(dpatch, config)
    return grads
