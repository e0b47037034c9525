"""LoRA experts, noisy top-k gating and Mixture-of-LoRA-Experts adaptation.

An expert holds ``A`` (r x l) and ``B`` (d x r) and contributes
``(alpha / r) * B @ A @ x``. A bank routes each token (latent frame) to the
top-k experts by ``softmax(Wg x + eps)`` and adds the gated sum to the frozen
host map. ``B`` starts at zero, so injecting or extending a bank leaves model
outputs unchanged.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError, DimensionError
from .numeric import Rng, count_parameters, matmul, seeded_normal, softmax

ATTN_TARGETS = ("Wq", "Wk", "Wv", "Wo")
MLP_TARGETS = ("mlp", "mlp_in", "mlp_out")
KNOWN_TARGETS = ATTN_TARGETS + MLP_TARGETS
# "mlp" adapts the feed-forward sublayer as a whole (one branch, input->output).
DEFAULT_MOELORA_TARGETS = ("Wq", "Wk", "Wv", "Wo", "mlp")
DEFAULT_LORA_TARGETS = ATTN_TARGETS
TARGET_ALIASES = {
    "all": DEFAULT_MOELORA_TARGETS,
    "attn": ATTN_TARGETS,
    "mlp+attn": DEFAULT_MOELORA_TARGETS,
}


class LoraExpert(nn.Module):
    def __init__(self, in_features: int, out_features: int, rank: int = 8, alpha: float | None = None,
                 init_std: float | None = None):
        super().__init__()
        if rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        std = 1.0 / math.sqrt(in_features) if init_std is None else init_std
        self.A = nn.Parameter(torch.randn(rank, in_features) * std)
        self.B = nn.Parameter(torch.zeros(out_features, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> torch.Tensor:
        return self.scale * matmul(self.B, self.A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * matmul(matmul(x, self.A.T), self.B.T)


def _check_host(W0: torch.Tensor, e: LoraExpert) -> None:
    if W0.shape != (e.B.shape[0], e.A.shape[1]):
        raise DimensionError(f"host weight {tuple(W0.shape)} does not match expert "
                             f"B{tuple(e.B.shape)} A{tuple(e.A.shape)}")


def lora_forward(W0: torch.Tensor, e: LoraExpert, x: torch.Tensor) -> torch.Tensor:
    """``W0 x + (alpha / r) B A x`` for ``x`` of shape ``(..., l)``."""
    _check_host(W0, e)
    if x.shape[-1] != W0.shape[1]:
        raise DimensionError(f"input width {x.shape[-1]} != host input width {W0.shape[1]}")
    return matmul(x, W0.T) + e(x)


def lora_merge(W0: torch.Tensor, e: LoraExpert) -> torch.Tensor:
    """New tensor ``W0 + (alpha / r) B A``; ``W0`` is not modified."""
    _check_host(W0, e)
    return W0 + e.delta_weight()


class Router(nn.Module):
    """Gating matrix ``Wg`` (N x l) plus learnable gating-noise mean and log-std."""

    def __init__(self, in_features: int, num_experts: int, top_k: int, init_std: float = 0.01):
        super().__init__()
        if not 1 <= top_k <= num_experts:
            raise ConfigError(f"top_k must lie in [1, {num_experts}], got {top_k}")
        self.top_k = top_k
        self.Wg = nn.Parameter(torch.randn(num_experts, in_features) * init_std)
        self.noise_mu = nn.Parameter(torch.zeros(()))
        self.noise_log_sigma = nn.Parameter(torch.zeros(()))

    @property
    def num_experts(self) -> int:
        return self.Wg.shape[0]


def gate_logits(x: torch.Tensor, router: Router, rng: Rng | None = None, training: bool = False) -> torch.Tensor:
    """``Wg x + eps`` with ``eps ~ N(mu, sigma^2 I)`` in training and ``eps = mu`` otherwise."""
    logits = matmul(x, router.Wg.T)
    if training:
        if rng is not None:
            n = seeded_normal(rng, logits.shape, logits.dtype)
        else:
            n = torch.randn_like(logits)
        return logits + router.noise_mu + torch.exp(router.noise_log_sigma) * n
    return logits + router.noise_mu


def gate(x: torch.Tensor, router: Router, rng: Rng | None = None, training: bool = False) -> torch.Tensor:
    """``softmax(Wg x + eps)``; ``eps ~ N(mu, sigma^2 I)`` in training, ``eps = mu`` otherwise."""
    return softmax(gate_logits(x, router, rng, training), axis=-1)


def topk_select(weights: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest weights along the last axis; ties go to the lowest index."""
    n = weights.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    order = torch.sort(-weights.detach(), dim=-1, stable=True).indices
    return order[..., :k]


def selection_mask(weights: torch.Tensor, k: int) -> torch.Tensor:
    idx = topk_select(weights, k)
    return torch.zeros_like(weights).scatter(-1, idx, 1.0)


class AdapterBank(nn.Module):
    """Experts sharing one host map, plus a router when there is more than one expert.

    ``forward`` returns only the adaptation delta; the host output is added by
    :class:`AdaptedModule`.

    Experts appended by :meth:`append_expert` are additive: the original
    experts keep their top-k routing, normalised over their own logits, and
    every appended expert is always active with weight equal to its softmax
    share over the full logit vector. With ``B = 0`` the appended expert then
    leaves outputs unchanged, while its gate stays open enough to train.
    """

    def __init__(self, in_features: int, out_features: int, num_experts: int = 5, top_k: int = 3,
                 rank: int = 8, alpha: float | None = None, renormalize: bool = False,
                 use_router: bool | None = None):
        super().__init__()
        if num_experts < 1:
            raise ContractError("an adapter bank needs at least one expert")
        self.in_features, self.out_features = in_features, out_features
        self.rank, self.alpha = rank, float(rank if alpha is None else alpha)
        self.renormalize = renormalize
        self.experts = nn.ModuleList(LoraExpert(in_features, out_features, rank, alpha) for _ in range(num_experts))
        use_router = num_experts > 1 if use_router is None else use_router
        self.router = Router(in_features, num_experts, top_k) if use_router else None
        self._top_k = top_k if use_router else 1
        self.base_experts = num_experts
        self.rng: Rng | None = None
        self.last_gates: torch.Tensor | None = None
        self.last_mask: torch.Tensor | None = None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def top_k(self) -> int:
        return self.router.top_k if self.router is not None else self._top_k

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        """Weights of the original experts (softmax over their logits only)."""
        if self.router is None:
            return torch.ones(*x.shape[:-1], 1, dtype=x.dtype)
        return softmax(gate_logits(x, self.router, self.rng, self.training)[..., :self.base_experts], axis=-1)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Per-expert mixing weights after top-k (zeros for unselected experts)."""
        if self.router is None:
            g = torch.ones(*x.shape[:-1], 1, dtype=x.dtype)
            logits = None
        else:
            logits = gate_logits(x, self.router, self.rng, self.training)
            g = softmax(logits[..., :self.base_experts], axis=-1)
        mask = selection_mask(g, self.top_k)
        w = g * mask
        if self.renormalize:
            w = w / w.sum(dim=-1, keepdim=True)
        self.last_gates, self.last_mask = g.detach(), mask
        if self.num_experts > self.base_experts:
            w = torch.cat([w, softmax(logits, axis=-1)[..., self.base_experts:]], dim=-1)
        return w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not len(self.experts):
            raise ContractError("empty adapter bank")
        w = self.weights(x)
        out = 0
        for i, e in enumerate(self.experts):
            out = out + w[..., i:i + 1] * e(x)
        return out

    def append_expert(self, generator: torch.Generator | None = None) -> LoraExpert:
        e = LoraExpert(self.in_features, self.out_features, self.rank, self.alpha)
        if generator is not None:
            with torch.no_grad():
                e.A.copy_(torch.randn(e.A.shape, generator=generator) / math.sqrt(self.in_features))
        e.to(self.experts[0].A.dtype)
        self.experts.append(e)
        if self.router is not None:
            old = self.router.Wg
            self.router.Wg = nn.Parameter(torch.cat([old.detach(), torch.zeros(1, old.shape[1], dtype=old.dtype)]))
        return e


def moelora_forward(W0: torch.Tensor, bank: AdapterBank, x: torch.Tensor, rng: Rng | None = None,
                    training: bool = False) -> torch.Tensor:
    """``W0 x + sum_{i in S(x)} G_i(x) (alpha / r) B_i A_i x`` with per-token routing."""
    if not len(bank.experts):
        raise ContractError("empty adapter bank")
    _check_host(W0, bank.experts[0])
    was = bank.training
    bank.train(training)
    bank.rng = rng
    try:
        return matmul(x, W0.T) + bank(x)
    finally:
        bank.train(was)


class AdaptedModule(nn.Module):
    """Host module (frozen) plus an adapter bank on the same input."""

    def __init__(self, host: nn.Module, bank: AdapterBank):
        super().__init__()
        self.host = host
        self.bank = bank

    def forward(self, x):
        return self.host(x) + self.bank(x)


def load_balance_loss(gates: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``N * sum_i f_i * P_i`` over tokens.

    ``f_i`` is the share of routing assignments sent to expert ``i`` and
    ``P_i`` its mean gate weight. Uniform routing gives 1, all traffic to one
    expert gives N.
    """
    g = gates.reshape(-1, gates.shape[-1])
    m = mask.reshape(-1, mask.shape[-1])
    n = g.shape[-1]
    f = m.sum(0) / m.sum()
    p = g.mean(0)
    return n * (f * p).sum()


# ---------------------------------------------------------------------------
# Injection into a uDiT


@dataclass
class AdapterConfig:
    mode: str = "moelora"
    targets: list[str] = field(default_factory=lambda: list(DEFAULT_MOELORA_TARGETS))
    lora_targets: list[str] = field(default_factory=lambda: list(DEFAULT_LORA_TARGETS))
    rank: int = 8
    alpha: float = 8.0
    num_experts: int = 5
    top_k: int = 3
    renormalize: bool = False
    load_balance_coef: float = 0.0

    def __post_init__(self):
        if self.mode not in ("full", "lora", "moelora"):
            raise ConfigError(f"unknown adaptation mode '{self.mode}'")
        resolve_targets(self.targets)
        resolve_targets(self.lora_targets)
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError("top_k must lie in [1, num_experts]")

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_targets(targets) -> list[str]:
    if isinstance(targets, str):
        targets = [targets]
    out: list[str] = []
    for t in targets:
        for name in TARGET_ALIASES.get(t, (t,)):
            if name not in KNOWN_TARGETS:
                raise ConfigError(f"unknown adapter target '{name}'")
            if name not in out:
                out.append(name)
    if not out:
        raise ConfigError("no adapter targets given")
    return out


def _target_slots(block) -> dict[str, tuple[nn.Module, str]]:
    return {
        "Wq": (block.attn, "q"),
        "Wk": (block.attn, "k"),
        "Wv": (block.attn, "v"),
        "Wo": (block.attn, "o"),
        "mlp": (block, "mlp"),
        "mlp_in": (block.mlp, "fc1"),
        "mlp_out": (block.mlp, "fc2"),
    }


def _io_features(module: nn.Module) -> tuple[int, int]:
    if isinstance(module, nn.Linear):
        return module.in_features, module.out_features
    if isinstance(module, AdaptedModule):
        return module.bank.in_features, module.bank.out_features
    return module.fc1.in_features, module.fc2.out_features


def freeze(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def adapter_banks(model: nn.Module) -> list[tuple[str, AdapterBank]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, AdapterBank)]


def inject(model: nn.Module, targets, num_experts: int = 5, top_k: int = 3, rank: int = 8,
           alpha: float | None = None, renormalize: bool = False, seed: int | None = None) -> nn.Module:
    """Attach an adapter bank to each targeted map of every block and freeze the backbone.

    ``num_experts=1`` gives plain LoRA (no router). Experts start with ``B = 0``.
    """
    names = resolve_targets(targets)
    if "mlp" in names and ({"mlp_in", "mlp_out"} & set(names)):
        raise ConfigError("'mlp' adapts the whole feed-forward sublayer; do not combine with mlp_in/mlp_out")
    if adapter_banks(model):
        raise ConfigError("model already carries adapters")
    freeze(model)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    dtype = next(model.parameters()).dtype
    for block in model.blocks:
        slots = _target_slots(block)
        for name in names:
            parent, attr = slots[name]
            host = getattr(parent, attr)
            fin, fout = _io_features(host)
            bank = AdapterBank(fin, fout, num_experts, top_k, rank, alpha, renormalize)
            if gen is not None:
                with torch.no_grad():
                    for e in bank.experts:
                        e.A.copy_(torch.randn(e.A.shape, generator=gen) / math.sqrt(fin))
                    if bank.router is not None:
                        bank.router.Wg.copy_(torch.randn(bank.router.Wg.shape, generator=gen) * 0.01)
            bank.to(dtype)
            setattr(parent, attr, AdaptedModule(host, bank))
    model.adapter_meta = {"targets": names, "num_experts": num_experts, "top_k": top_k, "rank": rank,
                          "alpha": float(rank if alpha is None else alpha), "renormalize": renormalize}
    return model


def extend_with_expert(model: nn.Module, seed: int | None = None) -> nn.Module:
    """Append one zero-initialised expert per bank; only new experts and routers stay trainable."""
    banks = adapter_banks(model)
    if not banks:
        raise ConfigError("model has no adapters to extend")
    if any(b.router is None for _, b in banks):
        raise ConfigError("plain LoRA banks cannot be extended; inject MoELoRA first")
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    freeze(model)
    for _, bank in banks:
        new = bank.append_expert(gen)
        for p in new.parameters():
            p.requires_grad_(True)
        for p in bank.router.parameters():
            p.requires_grad_(True)
    model.adapter_meta["num_experts"] = banks[0][1].num_experts
    return model


def set_routing_rng(model: nn.Module, rng: Rng | None) -> None:
    for i, (_, bank) in enumerate(adapter_banks(model)):
        bank.rng = None if rng is None else rng.derive(i)


def routing_stats(model: nn.Module) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(b.last_gates, b.last_mask) for _, b in adapter_banks(model) if b.last_gates is not None]


def trainable_parameter_names(model: nn.Module) -> list[str]:
    return [n for n, p in model.named_parameters() if p.requires_grad]


def trainable_fraction(model: nn.Module) -> float:
    params = list(model.parameters())
    return count_parameters(p for p in params if p.requires_grad) / count_parameters(params)


def snapshot(model: nn.Module, frozen_only: bool = True) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()
            if not (frozen_only and p.requires_grad)}


def changed_tensors(model: nn.Module, snap: dict[str, torch.Tensor]) -> list[str]:
    params = dict(model.named_parameters())
    return [n for n, t in snap.items() if not torch.equal(params[n].detach(), t)]


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach() for n, p in model.named_parameters() if ".bank." in n}
