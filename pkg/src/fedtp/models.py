"""Transformer backbone with attention projections split from shared weights.

Image inputs follow a ViT path (patchify -> linear embed -> class token ->
positional embedding); token inputs use an embedding table with a causal
mask. Both share the same pre-norm block stack, so the hypernetwork sees the
same attention-set layout regardless of the task.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IMAGE = "image-classification"
NEXT_TOKEN = "next-token"

_ATTN_RE = re.compile(r"^blocks\.(\d+)\.attn\.(wq|wk|wv|wo)$")
HEAD_PARAMS = ("head.w", "head.b")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    task: str = IMAGE
    num_blocks: int = 2
    num_heads: int = 4
    d_model: int = 32
    mlp_hidden: int = 64
    patch_size: int = 4
    image_extent: int = 16
    channels: int = 3
    num_classes: int = 10
    seq_len: int = 32
    vocab_size: int = 16
    pooling: str = "cls"
    personalize_out_proj: bool = False
    dtype: str = "float64"

    def validate(self) -> "ModelConfig":
        problems = []
        if self.task not in (IMAGE, NEXT_TOKEN):
            problems.append(f"task must be {IMAGE!r} or {NEXT_TOKEN!r}, got {self.task!r}")
        for name in ("num_blocks", "num_heads", "d_model", "mlp_hidden"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.num_heads >= 1 and self.d_model % self.num_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by num_heads ({self.num_heads})")
        if self.task == IMAGE:
            if self.patch_size < 1 or self.image_extent % self.patch_size:
                problems.append(
                    f"image_extent ({self.image_extent}) must be divisible by patch_size ({self.patch_size})"
                )
            if self.num_classes < 2:
                problems.append("num_classes must be >= 2")
        else:
            if self.vocab_size < 2:
                problems.append("vocab_size must be >= 2")
            if self.seq_len < 1:
                problems.append("seq_len must be >= 1")
        if self.pooling not in ("cls", "mean"):
            problems.append(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if self.dtype not in ("float64", "float32"):
            problems.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def num_tokens(self) -> int:
        """Sequence length seen by the attention blocks."""
        if self.task == NEXT_TOKEN:
            return self.seq_len
        grid = self.image_extent // self.patch_size
        return grid * grid + (1 if self.pooling == "cls" else 0)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def attention_roles(self) -> tuple[str, ...]:
        return ("wq", "wk", "wv", "wo") if self.personalize_out_proj else ("wq", "wk", "wv")

    def attention_names(self) -> list[str]:
        return [f"blocks.{b}.attn.{r}" for b in range(self.num_blocks) for r in self.attention_roles]

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(num_blocks=8, num_heads=8, d_model=128, mlp_hidden=256, image_extent=32),
}


@dataclass
class ParamPartition:
    """Model parameters split into personalized projections and the rest."""

    attention: dict[str, np.ndarray] = field(default_factory=dict)
    shared: dict[str, np.ndarray] = field(default_factory=dict)

    def merged(self) -> dict[str, np.ndarray]:
        return {**self.shared, **self.attention}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hdim = config.d_model, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    if config.task == IMAGE:
        shapes["patch_embed.w"] = (config.patch_dim, d)
        shapes["patch_embed.b"] = (d,)
        if config.pooling == "cls":
            shapes["cls_token"] = (1, d)
        out = config.num_classes
    else:
        shapes["tok_embed"] = (config.vocab_size, d)
        out = config.vocab_size
    shapes["pos_embed"] = (config.num_tokens, d)
    for b in range(config.num_blocks):
        p = f"blocks.{b}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        for role in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{role}"] = (d, d)
        # no key bias: softmax is invariant to it, so its gradient is identically zero
        shapes[f"{p}.attn.bq"] = (d,)
        shapes[f"{p}.attn.bv"] = (d,)
        shapes[f"{p}.attn.bo"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, hdim)
        shapes[f"{p}.mlp.b1"] = (hdim,)
        shapes[f"{p}.mlp.w2"] = (hdim, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, out)
    shapes["head.b"] = (out,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> ParamPartition:
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    d = config.d_model
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if _ATTN_RE.match(name):
            arr = rng.normal(0.0, 1.0 / math.sqrt(d), shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif name in ("cls_token", "pos_embed"):
            arr = rng.normal(0.0, 0.02, shape)
        elif name == "tok_embed":
            arr = rng.normal(0.0, 1.0, shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return split_params(params, config)


def is_attention_param(name: str, config: ModelConfig) -> bool:
    m = _ATTN_RE.match(name)
    return bool(m) and m.group(2) in config.attention_roles


def split_params(flat: Mapping[str, np.ndarray], config: ModelConfig) -> ParamPartition:
    known = param_shapes(config)
    unknown = [k for k in flat if k not in known]
    if unknown:
        raise KeyError(f"unknown parameter names: {unknown}")
    part = ParamPartition()
    for k, v in flat.items():
        (part.attention if is_attention_param(k, config) else part.shared)[k] = v
    return part


def merge_params(
    attention: Mapping[str, np.ndarray], shared: Mapping[str, np.ndarray], config: ModelConfig
) -> dict[str, np.ndarray]:
    """Inverse of :func:`split_params`; every expected parameter must be present."""
    known = param_shapes(config)
    overlap = set(attention) & set(shared)
    if overlap:
        raise KeyError(f"parameters present in both sets: {sorted(overlap)}")
    flat = {**shared, **attention}
    missing = [k for k in known if k not in flat]
    if missing:
        raise KeyError(f"missing parameters: {missing}")
    unknown = [k for k in flat if k not in known]
    if unknown:
        raise KeyError(f"unknown parameter names: {unknown}")
    for k, v in flat.items():
        if tuple(v.shape) != known[k]:
            raise ad.ShapeError(f"parameter {k!r} has shape {tuple(v.shape)}, expected {known[k]}")
    return {k: flat[k] for k in known}


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``C x H x W`` (or a batch ``B x C x H x W``) into flattened patches.

    Patches are taken in row-major grid order; each token is the patch's
    channel-major flattening, giving ``m x (C * p * p)``.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        image = image[None]
    if image.ndim != 4:
        raise ad.ShapeError(f"patchify: expected C x H x W or B x C x H x W, got shape {image.shape[1:]}")
    n, c, h, w = image.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ad.ShapeError(f"patchify: extent {h}x{w} not divisible by patch size {p}")
    x = image.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(n, (h // p) * (w // p), c * p * p)
    return x if batched else x[0]


def attention_forward(H, wq, wk, wv, heads: int, bq=None, bv=None, mask=None):
    """Multi-head self-attention without the output projection.

    ``H`` is ``m x d`` or ``B x m x d``; each projection is one ``d x d``
    matrix sliced into ``heads`` column blocks. Returns the concatenated head
    outputs and the ``(B,) heads x m x m`` attention weights as an array.
    """
    H = ad._as_tensor(H)
    d = H.shape[-1]
    for nm, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        if tuple(ad._as_tensor(w).shape) != (d, d):
            raise ad.ShapeError(f"attention_forward: {nm} must be {(d, d)}, got {ad._as_tensor(w).shape}")
    if d % heads:
        raise ad.ShapeError(f"attention_forward: width {d} not divisible by {heads} heads")
    single = H.ndim == 2
    if single:
        H = ad.reshape(H, (1,) + H.shape)
    b, m, _ = H.shape
    dh = d // heads
    q = ad.matmul(H, wq)
    k = ad.matmul(H, wk)
    v = ad.matmul(H, wv)
    if bq is not None:
        q = ad.add(q, bq)
    if bv is not None:
        v = ad.add(v, bv)

    def split(t):
        return ad.transpose(ad.reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask)
    weights = ad.softmax(scores)
    out = ad.matmul(weights, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, m, d))
    if single:
        return ad.reshape(out, (m, d)), weights.data[0]
    return out, weights.data


def _causal_mask(m: int, dtype) -> np.ndarray:
    upper = np.triu(np.ones((m, m), dtype=bool), k=1)
    return np.where(upper, -1e9, 0.0).astype(dtype)


def _as_leaves(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def model_forward(params: Mapping, batch: np.ndarray, config: ModelConfig, trace: bool = False):
    """Logits for a batch plus, if ``trace``, each block's attention weights.

    ``params`` maps names to arrays or tensors (tensors let a surrounding tape
    differentiate through). Image batches are ``B x C x H x W`` (already
    patchified ``B x m x P`` is also accepted); token batches are ``B x T``
    integer arrays. The trace is a list with one ``B x heads x m x m`` array
    per block.
    """
    P = _as_leaves(params)
    batch = np.asarray(batch)
    mask = None
    if config.task == IMAGE:
        if batch.ndim == 4:
            if batch.shape[1:] != (config.channels, config.image_extent, config.image_extent):
                raise ad.ShapeError(
                    f"model_forward: expected images of shape "
                    f"{(config.channels, config.image_extent, config.image_extent)}, got {batch.shape[1:]}"
                )
            tokens = patchify(batch, config.patch_size)
        elif batch.ndim == 3 and batch.shape[2] == config.patch_dim:
            tokens = batch
        else:
            raise ad.ShapeError(f"model_forward: image task cannot take a batch of shape {batch.shape}")
        n = tokens.shape[0]
        x = ad.add(ad.matmul(tokens.astype(config.dtype, copy=False), P["patch_embed.w"]), P["patch_embed.b"])
        if config.pooling == "cls":
            cls = ad.add(np.zeros((n, 1, config.d_model), dtype=config.dtype), P["cls_token"])
            x = ad.concat([cls, x], axis=1)
    else:
        if batch.ndim != 2 or not np.issubdtype(batch.dtype, np.integer):
            raise ad.ShapeError(f"model_forward: next-token task expects a B x T integer batch, got {batch.shape}")
        if batch.shape[1] != config.seq_len:
            raise ad.ShapeError(f"model_forward: sequence length {batch.shape[1]} != {config.seq_len}")
        x = ad.embedding(P["tok_embed"], batch)
        mask = _causal_mask(config.seq_len, config.dtype)
    x = ad.add(x, P["pos_embed"])

    attn_trace = [] if trace else None
    for b in range(config.num_blocks):
        p = f"blocks.{b}"
        h = ad.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
        a, weights = attention_forward(
            h, P[f"{p}.attn.wq"], P[f"{p}.attn.wk"], P[f"{p}.attn.wv"], config.num_heads,
            bq=P[f"{p}.attn.bq"], bv=P[f"{p}.attn.bv"], mask=mask,
        )
        if trace:
            attn_trace.append(weights)
        a = ad.add(ad.matmul(a, P[f"{p}.attn.wo"]), P[f"{p}.attn.bo"])
        x = ad.add(x, a)
        h = ad.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        h = ad.gelu(ad.add(ad.matmul(h, P[f"{p}.mlp.w1"]), P[f"{p}.mlp.b1"]))
        h = ad.add(ad.matmul(h, P[f"{p}.mlp.w2"]), P[f"{p}.mlp.b2"])
        x = ad.add(x, h)
    x = ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    if config.task == IMAGE:
        x = ad.slice_(x, (slice(None), 0)) if config.pooling == "cls" else ad.mean(x, axis=1)
    logits = ad.add(ad.matmul(x, P["head.w"]), P["head.b"])
    return logits, attn_trace


def loss_fn(params: Mapping, batch: np.ndarray, targets: np.ndarray, config: ModelConfig):
    logits, _ = model_forward(params, batch, config)
    return ad.cross_entropy(logits, targets)


def predict(params: Mapping, batch: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Argmax predictions; ties go to the lowest class index."""
    logits, _ = model_forward(params, batch, config)
    return np.argmax(logits.data, axis=-1)
