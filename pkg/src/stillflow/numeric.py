"""Numeric core: seeded randomness, differentiable primitives, AdamW, checkpoints.

Tensors are ``torch.Tensor`` objects; reverse-mode differentiation is torch
autograd. Model state is float32. Gradient-check tests run the same code in
float64 by casting modules and inputs with ``.double()``.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .errors import ContractError, DimensionError, IngestionError, OptimizerError

MASK64 = (1 << 64) - 1
CHECKPOINT_FORMAT_VERSION = 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _fold_str(text: str) -> int:
    raw = text.encode("utf-8")
    h = len(raw)
    for i in range(0, len(raw), 8):
        h = _splitmix64(h ^ int.from_bytes(raw[i:i + 8], "little"))
    return h


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Backed by Philox4x64 with the 128-bit key ``seed | stream << 64``, so the
    draw sequence depends only on the key and the number of draws made.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def derive(self, *labels: int | str) -> "Rng":
        """Independent child generator; same labels always give the same child."""
        s = self.stream
        for label in labels:
            if isinstance(label, str):
                label = _fold_str(label)
            s = _splitmix64(s ^ _splitmix64(int(label) & MASK64))
        return Rng(self.seed, s)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(shape), dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        out = self._gen.random(size=None if shape is None else tuple(shape))
        return low + (high - low) * out

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)


def seeded_normal(rng: Rng, shape, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard-normal tensor drawn from ``rng``."""
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    return torch.from_numpy(rng.normal(shape, dtype=np_dtype)).to(dtype)


def seeded_uniform(rng: Rng, shape, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.asarray(rng.uniform(shape))).to(dtype)


# ---------------------------------------------------------------------------
# Differentiable primitives


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (batched operands broadcast)."""
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-6,
) -> torch.Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


class GradientMap(Mapping):
    """Gradients keyed by the leaf tensor object (identity, not value)."""

    def __init__(self, leaves: list[torch.Tensor], grads: Iterable[torch.Tensor | None]):
        self._leaves = leaves
        self._grads = {id(leaf): g for leaf, g in zip(leaves, grads)}

    def __getitem__(self, leaf: torch.Tensor) -> torch.Tensor:
        g = self._grads[id(leaf)]
        return torch.zeros_like(leaf) if g is None else g

    def __iter__(self):
        return iter(self._leaves)

    def __len__(self) -> int:
        return len(self._leaves)


def _graph_leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    seen: set[int] = set()
    leaves: list[torch.Tensor] = []
    stack = [loss.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or id(fn) in seen:
            continue
        seen.add(id(fn))
        var = getattr(fn, "variable", None)
        if var is not None:
            leaves.append(var)
        stack.extend(nxt for nxt, _ in fn.next_functions)
    if loss.grad_fn is None and loss.requires_grad:
        leaves.append(loss)
    return leaves


def backward(loss: torch.Tensor, wrt: Iterable[torch.Tensor] | None = None) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to its requires-grad leaves.

    A forward graph can be differentiated once; a second call on the same loss
    raises ``ContractError``.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_stillflow_consumed", False):
        raise ContractError("graph already differentiated; run a fresh forward pass")
    leaves = list(wrt) if wrt is not None else _graph_leaves(loss)
    if not leaves:
        return GradientMap([], [])
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    loss._stillflow_consumed = True
    return GradientMap(leaves, grads)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")


@torch.no_grad()
def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
) -> OptimizerState:
    """One AdamW update, in place on ``params``.

    Weight decay is decoupled: it multiplies the parameter by
    ``1 - lr * weight_decay`` and never enters the moment estimates.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for '{name}'")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


class AdamW:
    """AdamW over a named parameter set, reading gradients from ``.grad``."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr=2e-4,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, m in self.state.exp_avg.items():
            out[f"exp_avg.{n}"] = m
            out[f"exp_avg_sq.{n}"] = self.state.exp_avg_sq[n]
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], step: int) -> None:
        self.state.step = int(step)
        for n in self.params:
            if f"exp_avg.{n}" in tensors:
                self.state.exp_avg[n] = tensors[f"exp_avg.{n}"].clone()
                self.state.exp_avg_sq[n] = tensors[f"exp_avg_sq.{n}"].clone()


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
# float32 little-endian payloads concatenated in header order. Offsets are
# byte offsets into the payload section.


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor | np.ndarray], model_type: str,
                    meta: Mapping | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_type": model_type,
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, expect_model_type: str | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IngestionError(f"unsupported checkpoint format in {path}")
    if expect_model_type is not None and header.get("model_type") != expect_model_type:
        raise IngestionError(
            f"{path} holds model_type '{header.get('model_type')}', expected '{expect_model_type}'")
    base = 8 + n
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(e["shape"]))
    return tensors, header


def count_parameters(params: Iterable[torch.Tensor]) -> int:
    return int(sum(math.prod(p.shape) for p in params))
