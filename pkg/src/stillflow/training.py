"""Training loops for the compressor, the velocity model and adapters.

Every loop draws step ``s`` randomness from ``Rng(seed).derive(tag, s)``, so a
run resumed from a checkpoint at step ``s`` continues exactly as the
uninterrupted run would. Checkpoints hold model tensors, AdamW moments and
the step; the curve CSV has one row per completed step.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import adapters as ad
from .compressor import Compressor, CompressorConfig, vae_loss
from .config import RunConfig
from .datasetgen import load_pairs
from .errors import ConfigError, OptimizerError, TrainingError
from .flow import LatentScaler, cfm_loss
from .numeric import AdamW, Rng, load_checkpoint, read_checkpoint_header, save_checkpoint
from .udit import UDiT, UditConfig

log = logging.getLogger("stillflow.train")

OPT_PREFIX = "__opt__."


# ---------------------------------------------------------------------------
# Batches


def crop_batch(rng: Rng, signals: list[tuple[np.ndarray, ...]], batch: int, length: int) -> list[torch.Tensor]:
    """Random aligned crops of ``length`` along the last axis, zero-padded when shorter."""
    picks = rng.integers(0, len(signals), size=batch)
    out = [[] for _ in signals[0]]
    for i in picks:
        group = signals[int(i)]
        n = group[0].shape[-1]
        start = int(rng.integers(0, max(1, n - length + 1)))
        for j, x in enumerate(group):
            seg = x[..., start:start + length]
            if seg.shape[-1] < length:
                seg = np.concatenate([seg, np.zeros(seg.shape[:-1] + (length - seg.shape[-1],), seg.dtype)], -1)
            out[j].append(seg)
    return [torch.from_numpy(np.stack(o).astype(np.float32)) for o in out]


# ---------------------------------------------------------------------------
# Checkpoints and curves


def model_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: t.detach() for n, t in model.state_dict().items()}


def save_training_state(path, model, opt: AdamW, step: int, model_type: str, meta: dict) -> None:
    tensors = model_tensors(model)
    tensors.update({OPT_PREFIX + k: v for k, v in opt.state_tensors().items()})
    save_checkpoint(path, tensors, model_type, {**meta, "step": step})


def load_model_tensors(model, tensors: dict[str, torch.Tensor]) -> None:
    own = {k: v for k, v in tensors.items() if not k.startswith(OPT_PREFIX)}
    model.load_state_dict(own, strict=True)


def restore_optimizer(opt: AdamW, tensors: dict[str, torch.Tensor], step: int) -> None:
    opt.load_state_tensors({k[len(OPT_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPT_PREFIX)}, step)


class Curve:
    """Training curve CSV ``step,loss,<parts...>``; rows past a resume point are dropped."""

    def __init__(self, path, fields: list[str]):
        self.path = Path(path)
        self.fields = ["step", "loss", *fields]
        self.rows: list[dict] = []

    def load_until(self, step: int) -> None:
        if self.path.exists():
            with open(self.path, newline="") as fh:
                self.rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= step]

    def add(self, step: int, parts: dict[str, float]) -> None:
        self.rows.append({"step": step, **{k: repr(float(parts[k])) for k in self.fields[1:]}})

    def flush(self) -> None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, self.fields, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(buf.getvalue())
        tmp.replace(self.path)

    def losses(self) -> list[float]:
        return [float(r["loss"]) for r in self.rows]


@dataclass
class LoopResult:
    steps: int
    losses: list[float]
    checkpoint: Path


def _optimizer(model, train, lr: float | None = None) -> AdamW:
    return AdamW(model.named_parameters(), lr=lr or train.lr, betas=train.betas, eps=train.eps,
                 weight_decay=train.weight_decay)


def run_loop(model, opt: AdamW, loss_fn, steps: int, out_dir, name: str, model_type: str, meta: dict,
             parts: list[str], seed: int, tag: str, checkpoint_every: int, grad_clip: float | None,
             resume: bool = True, on_step=None) -> LoopResult:
    """Shared optimisation loop.

    ``loss_fn(rng, step)`` returns ``(loss_tensor, parts_dict)``. On a
    non-finite loss or gradient the loop stops, the last good checkpoint is
    left in place and :class:`TrainingError` is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{name}.ckpt"
    curve = Curve(out / f"{name}_curve.csv", parts)
    start = 0
    if resume and ckpt.exists():
        tensors, header = load_checkpoint(ckpt, model_type)
        load_model_tensors(model, tensors)
        start = int(header["meta"]["step"])
        restore_optimizer(opt, tensors, start)
        curve.load_until(start)
        log.info("%s: resumed at step %d", name, start)
    root = Rng(seed)
    model.train()
    for step in range(start, steps):
        rng = root.derive(tag, step)
        opt.zero_grad()
        loss, values = loss_fn(rng, step)
        if not torch.isfinite(loss):
            curve.flush()
            raise TrainingError(f"{name}: non-finite loss at step {step + 1}; last good checkpoint kept at {ckpt}")
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_([p for p in opt.params.values()], grad_clip)
        try:
            opt.step()
        except OptimizerError as exc:
            curve.flush()
            raise TrainingError(f"{name}: {exc} at step {step + 1}; last good checkpoint kept at {ckpt}") from exc
        curve.add(step + 1, {"loss": loss.item(), **values})
        if on_step is not None:
            on_step(step + 1)
        if (step + 1) % checkpoint_every == 0 or step + 1 == steps:
            save_training_state(ckpt, model, opt, step + 1, model_type, meta)
            curve.flush()
    if start >= steps:
        curve.flush()
    model.eval()
    return LoopResult(steps, curve.losses(), ckpt)


# ---------------------------------------------------------------------------
# Model loading


def build_compressor(cfg: CompressorConfig) -> Compressor:
    model = Compressor(cfg)
    for blk in list(model.enc_blocks) + list(model.dec_blocks):
        blk.zero_output_projections()
    return model


def load_compressor(path) -> Compressor:
    tensors, header = load_checkpoint(path, "compressor")
    model = Compressor(CompressorConfig(**header["meta"]["config"]))
    load_model_tensors(model, tensors)
    return model.eval()


def load_udit(path) -> tuple[UDiT, dict]:
    tensors, header = load_checkpoint(path, "udit")
    model = UDiT(UditConfig(**header["meta"]["config"]))
    load_model_tensors(model, tensors)
    return model.eval(), header["meta"]


def attach_adapters(model: UDiT, path) -> dict:
    """Inject adapters described in an adapter checkpoint and load their weights."""
    tensors, header = load_checkpoint(path, "adapters")
    meta = header["meta"]["adapter_meta"]
    ad.inject(model, meta["targets"], meta["num_experts_at_inject"], meta["top_k"], meta["rank"],
              meta["alpha"], meta["renormalize"])
    for _ in range(meta["num_experts"] - meta["num_experts_at_inject"]):
        ad.extend_with_expert(model)
    own = {k: v for k, v in tensors.items() if not k.startswith(OPT_PREFIX)}
    missing = set(own) - set(dict(model.named_parameters()))
    if missing:
        raise ConfigError(f"adapter checkpoint has tensors the model lacks: {sorted(missing)[:3]}")
    with torch.no_grad():
        params = dict(model.named_parameters())
        for k, v in own.items():
            params[k].copy_(v)
    return header["meta"]


# ---------------------------------------------------------------------------
# Loops


def train_vae(cfg: RunConfig, corpus_dir, out_dir, seed: int, steps: int | None = None,
              resume: bool = True) -> LoopResult:
    """Fit the compressor on clean and distorted training clips."""
    torch.manual_seed(seed)
    pairs = load_pairs(corpus_dir, "train", cfg.data.sample_rate)
    if not pairs:
        raise ConfigError(f"no training mixtures in {corpus_dir}")
    signals = [(x,) for _, m, c in pairs for x in (c, m)]
    model = build_compressor(cfg.compressor)
    tr = cfg.train
    opt = _optimizer(model, tr, tr.vae_lr)
    seg = int(round((tr.vae_segment_s or tr.segment_s) * cfg.data.sample_rate))
    batch = tr.vae_batch_size or tr.batch_size

    def loss_fn(rng, step):
        (x,) = crop_batch(rng.derive("crop"), signals, batch, seg)
        out = vae_loss(model, x, rng.derive("eps"))
        return out.total, {"recon": out.recon.item(), "kl": out.kl.item()}

    meta = {"config": cfg.compressor.to_dict(), "seed": seed}
    return run_loop(model, opt, loss_fn, tr.vae_steps if steps is None else steps, out_dir, "compressor",
                    "compressor", meta, ["recon", "kl"], seed, "vae", tr.checkpoint_every, tr.grad_clip, resume)


@torch.no_grad()
def encode_pairs(compressor: Compressor, pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    """Encoder means ``(z_clean, z_mix)`` of each full clip, as ``(D, L)`` arrays."""
    out = []
    for _, mix, clean in pairs:
        zc = compressor.encode(torch.from_numpy(np.asarray(clean, np.float32))).mu.numpy()
        zm = compressor.encode(torch.from_numpy(np.asarray(mix, np.float32))).mu.numpy()
        out.append((zc, zm))
    return out


def normalize_latents(latents, scaler: LatentScaler) -> list[tuple[np.ndarray, np.ndarray]]:
    return [tuple(scaler.normalize(torch.from_numpy(z)).numpy() for z in pair) for pair in latents]


def _cfm_loop(cfg: RunConfig, model, opt, latents, out_dir, seed, steps, name, model_type, meta, resume,
              tag: str, lb_coef: float = 0.0, saved: torch.nn.Module | None = None):
    tr = cfg.train
    seg = max(1, int(round(tr.segment_s * cfg.compressor.latent_rate)))
    seg = min(seg, model.cfg.max_len)
    path = cfg.flow.path

    def loss_fn(rng, step):
        zc, zm = crop_batch(rng.derive("crop"), latents, tr.batch_size, seg)
        ad.set_routing_rng(model, rng.derive("route"))
        loss = cfm_loss(model, zc, zm, rng.derive("cfm"), path)
        parts = {"cfm": loss.item()}
        if lb_coef:
            lb = sum(ad.load_balance_loss(g, m) for g, m in ad.routing_stats(model))
            loss = loss + lb_coef * lb
            parts["load_balance"] = lb.item()
        return loss, parts

    fields = ["cfm"] + (["load_balance"] if lb_coef else [])
    return run_loop(saved or model, opt, loss_fn, steps, out_dir, name, model_type, meta, fields, seed, tag,
                    tr.checkpoint_every, tr.grad_clip, resume)


def train_flow(cfg: RunConfig, corpus_dir, compressor_path, out_dir, seed: int, steps: int | None = None,
               resume: bool = True) -> LoopResult:
    """Fit the velocity model on latents of (clean, distorted) training pairs."""
    torch.manual_seed(seed)
    compressor = load_compressor(compressor_path)
    if compressor.cfg.latent_dim != cfg.udit.latent_dim:
        raise ConfigError(f"compressor latent_dim {compressor.cfg.latent_dim} != udit {cfg.udit.latent_dim}")
    latents = encode_pairs(compressor, load_pairs(corpus_dir, "train", cfg.data.sample_rate))
    scaler = LatentScaler.fit(zc for zc, _ in latents)
    latents = normalize_latents(latents, scaler)
    model = UDiT(cfg.udit)
    opt = _optimizer(model, cfg.train, cfg.train.flow_lr)
    meta = {"config": cfg.udit.to_dict(), "compressor": str(Path(compressor_path).resolve()), "seed": seed,
            "latent_scaler": scaler.to_dict()}
    return _cfm_loop(cfg, model, opt, latents, out_dir, seed, cfg.train.flow_steps if steps is None else steps,
                     "udit", "udit", meta, resume, "flow")


class AdapterView(torch.nn.Module):
    """Checkpoint face of an adapted model: its state is the adapter tensors only."""

    def __init__(self, model: torch.nn.Module):
        super().__init__()
        self.model = model

    def state_dict(self, *args, **kwargs):
        return dict(ad.adapter_state(self.model))

    def load_state_dict(self, sd, strict=True):
        with torch.no_grad():
            params = dict(self.model.named_parameters())
            for k, v in sd.items():
                params[k].copy_(v)


@dataclass
class AdaptResult(LoopResult):
    trainable_fraction: float = 0.0
    frozen_changed: list | None = None


def adapt(cfg: RunConfig, backbone_path, corpus_dir, out_dir, seed: int, mode: str | None = None,
          extend_from=None, steps: int | None = None, resume: bool = True) -> AdaptResult:
    """Fine-tune a trained velocity model in ``full``, ``lora`` or ``moelora`` mode.

    ``extend_from`` names a prior MoELoRA adapter checkpoint; its adapters are
    loaded, one expert is appended per bank and only the new experts and the
    routers are trained.
    """
    torch.manual_seed(seed)
    a = cfg.adapters
    mode = mode or a.mode
    model, meta = load_udit(backbone_path)
    compressor = load_compressor(meta["compressor"])
    latents = encode_pairs(compressor, load_pairs(corpus_dir, "train", cfg.data.sample_rate))
    latents = normalize_latents(latents, LatentScaler.from_dict(meta["latent_scaler"]))
    adapter_meta = None
    if extend_from is not None:
        header = read_checkpoint_header(extend_from)
        prior = header.get("meta", {})
        if header.get("model_type") != "adapters" or prior.get("mode") != "moelora":
            raise ConfigError(f"--extend needs a prior moelora adapter checkpoint, got {extend_from}")
        attach_adapters(model, extend_from)
        ad.extend_with_expert(model, seed)
        mode = "moelora"
    elif mode == "lora":
        ad.inject(model, a.lora_targets, 1, 1, a.rank, a.alpha, False, seed)
    elif mode == "moelora":
        ad.inject(model, a.targets, a.num_experts, a.top_k, a.rank, a.alpha, a.renormalize, seed)
    elif mode != "full":
        raise ConfigError(f"unknown adaptation mode '{mode}'")
    if mode != "full":
        adapter_meta = dict(model.adapter_meta)
        adapter_meta.setdefault("num_experts_at_inject", adapter_meta["num_experts"])
        if extend_from is not None:
            prev = load_checkpoint(extend_from, "adapters")[1]["meta"]["adapter_meta"]
            adapter_meta["num_experts_at_inject"] = prev["num_experts_at_inject"]
        model.adapter_meta = adapter_meta
    frac = ad.trainable_fraction(model)
    log.info("adapt mode=%s trainable parameters: %.3f%%", mode, 100 * frac)
    snap = ad.snapshot(model) if mode != "full" else {}
    opt = _optimizer(model, cfg.train)
    steps = cfg.train.adapt_steps if steps is None else steps
    lb = a.load_balance_coef if mode == "moelora" else 0.0
    if mode == "full":
        res = _cfm_loop(cfg, model, opt, latents, out_dir, seed, steps, "udit", "udit",
                        {**meta, "adapted_from": str(Path(backbone_path).resolve())}, resume, "adapt", 0.0)
        return AdaptResult(res.steps, res.losses, res.checkpoint, frac, [])
    ckpt_meta = {"mode": mode, "adapter_meta": adapter_meta, "backbone": str(Path(backbone_path).resolve()),
                 "seed": seed, "trainable_fraction": frac}

    res = _cfm_loop(cfg, model, opt, latents, out_dir, seed, steps, "adapters", "adapters", ckpt_meta, resume,
                    "adapt", lb, saved=AdapterView(model))
    changed = ad.changed_tensors(model, snap)
    log.info("frozen tensors changed: %d", len(changed))
    if changed:
        raise TrainingError(f"frozen backbone tensors changed during adaptation: {changed[:3]}")
    return AdaptResult(res.steps, res.losses, res.checkpoint, frac, changed)


def write_run_config(out_dir, cfg: RunConfig, extra: dict | None = None) -> None:
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "config": cfg.to_dict(), **(extra or {})}
    (out / "run_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
