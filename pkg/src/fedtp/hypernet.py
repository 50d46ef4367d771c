"""Server-side hypernetwork that emits per-client attention projections.

A shared ReLU MLP trunk maps a client embedding to a hidden code; one linear
head per Transformer block maps that code to the block's concatenated
``W_Q || W_K || W_V`` (plus ``W_O`` when the output projection is personalized).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tape, Tensor
from .models import ModelConfig


@dataclass(frozen=True)
class HyperNetConfig:
    embed_dim: int = 32
    hidden: int = 150
    trunk_layers: int = 4
    num_blocks: int = 2
    d_model: int = 32
    roles: tuple[str, ...] = ("wq", "wk", "wv")
    bias: bool = True

    @classmethod
    def for_model(cls, model: ModelConfig, embed_dim: int = 32, hidden: int = 150, trunk_layers: int = 4):
        return cls(
            embed_dim=embed_dim,
            hidden=hidden,
            trunk_layers=trunk_layers,
            num_blocks=model.num_blocks,
            d_model=model.d_model,
            roles=model.attention_roles,
        )

    @property
    def head_out(self) -> int:
        return len(self.roles) * self.d_model**2

    def output_names(self) -> list[str]:
        return [f"blocks.{b}.attn.{r}" for b in range(self.num_blocks) for r in self.roles]


def param_shapes(cfg: HyperNetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    width = cfg.embed_dim
    for i in range(cfg.trunk_layers):
        shapes[f"trunk.{i}.w"] = (width, cfg.hidden)
        if cfg.bias:
            shapes[f"trunk.{i}.b"] = (cfg.hidden,)
        width = cfg.hidden
    for b in range(cfg.num_blocks):
        shapes[f"heads.{b}.w"] = (width, cfg.head_out)
        if cfg.bias:
            shapes[f"heads.{b}.b"] = (cfg.head_out,)
    return shapes


def init_hypernet(cfg: HyperNetConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    phi = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            phi[name] = np.zeros(shape)
        elif name.startswith("trunk"):
            phi[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
        else:
            # generated projections start near the scale of a direct 1/sqrt(d) init
            phi[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0] * cfg.d_model), shape)
    return phi


def init_embeddings(num_clients: int, dim: int, seed: int, std: float = 1.0) -> list[np.ndarray]:
    if num_clients < 1 or dim < 1:
        raise ValueError(f"need num_clients >= 1 and dim >= 1, got {num_clients}, {dim}")
    rng = np.random.default_rng(seed)
    return list(rng.normal(0.0, std, (num_clients, dim)))


def generate(phi: Mapping, z, cfg: HyperNetConfig) -> dict[str, Tensor]:
    """Tensor-level forward; differentiable when run under a tape."""
    h = ad.reshape(z, (1, cfg.embed_dim))
    for i in range(cfg.trunk_layers):
        h = ad.matmul(h, phi[f"trunk.{i}.w"])
        if cfg.bias:
            h = ad.add(h, phi[f"trunk.{i}.b"])
        h = ad.relu(h)
    d = cfg.d_model
    out = {}
    for b in range(cfg.num_blocks):
        o = ad.matmul(h, phi[f"heads.{b}.w"])
        if cfg.bias:
            o = ad.add(o, phi[f"heads.{b}.b"])
        o = ad.reshape(o, (len(cfg.roles), d, d))
        for k, role in enumerate(cfg.roles):
            out[f"blocks.{b}.attn.{role}"] = ad.slice_(o, k)
    return out


def _check(phi: Mapping, z, cfg: HyperNetConfig) -> None:
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in phi:
            raise KeyError(f"hypernetwork parameter {name!r} missing")
        if tuple(np.shape(phi[name])) != shape:
            raise ShapeError(f"hypernetwork parameter {name!r} has shape {np.shape(phi[name])}, expected {shape}")
    if np.shape(z) != (cfg.embed_dim,):
        raise ShapeError(f"client embedding has shape {np.shape(z)}, expected ({cfg.embed_dim},)")


def hypernet_forward(phi: Mapping[str, np.ndarray], z: np.ndarray, cfg: HyperNetConfig) -> dict[str, np.ndarray]:
    """Attention projections ``h(phi; z)`` keyed by model parameter name."""
    _check(phi, z, cfg)
    return {k: t.data for k, t in generate(phi, np.asarray(z, dtype=float), cfg).items()}


def hypernet_grads(
    phi: Mapping[str, np.ndarray],
    z: np.ndarray,
    cotangent: Mapping[str, np.ndarray],
    cfg: HyperNetConfig,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Vector-Jacobian products of ``h(phi; z)`` against ``cotangent``.

    Returns ``(grad_phi, grad_z)``, i.e. the backward pass of
    :func:`hypernet_forward` seeded with the given output cotangent.
    """
    _check(phi, z, cfg)
    names = cfg.output_names()
    if set(cotangent) != set(names):
        raise KeyError(f"cotangent keys {sorted(cotangent)} do not match hypernetwork outputs {names}")
    leaves = ad.parameters(phi)
    zt = Tensor(np.asarray(z, dtype=float), requires_grad=True, name="__z__")
    with Tape() as tape:
        out = generate(leaves, zt, cfg)
    for n in names:
        if np.shape(cotangent[n]) != out[n].shape:
            raise ShapeError(f"cotangent for {n!r} has shape {np.shape(cotangent[n])}, expected {out[n].shape}")
    found = tape.vjp([out[n] for n in names], [cotangent[n] for n in names])
    grads = {t.name: g for t, g in found.values()}
    grad_z = grads.pop("__z__", np.zeros(cfg.embed_dim))
    grad_phi = {k: grads.get(k, np.zeros_like(v)) for k, v in phi.items()}
    return grad_phi, grad_z


def server_cotangent(delta_w: Mapping[str, np.ndarray], literal_paper_sign: bool = False) -> dict[str, np.ndarray]:
    """Cotangent fed to :func:`hypernet_grads` from a local change ``W^K - W^0``.

    By default the change is negated, so that ``phi - beta * VJP`` moves the
    generated weights toward the locally trained ones. ``literal_paper_sign``
    feeds the raw change instead.
    """
    if literal_paper_sign:
        return {k: np.asarray(v) for k, v in delta_w.items()}
    return {k: -np.asarray(v) for k, v in delta_w.items()}


def apply_server_update(phi, z, grad_phi, grad_z, beta: float):
    """``phi - beta * grad_phi`` and ``z - beta * grad_z``."""
    if beta < 0:
        raise ValueError(f"server learning rate must be non-negative, got {beta}")
    new_phi = {}
    for k, v in phi.items():
        g = grad_phi.get(k)
        if g is None:
            new_phi[k] = v
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite hypernetwork gradient for {k!r}")
        new_phi[k] = v - beta * g
    if grad_z is None:
        return new_phi, z
    if not np.all(np.isfinite(grad_z)):
        raise NonFiniteError("non-finite client embedding gradient")
    return new_phi, z - beta * grad_z
