"""``stillflow`` command line: data generation, training, adaptation, enhancement, evaluation.

Every command takes ``--preset`` (paper or desk) and an optional ``--config``
JSON overlay, writes ``run_config.json`` (config plus tool version) into its
output directory and draws all randomness from ``--seed``. Failures print one
line ``error: <category>: <message>``; config and ingestion errors exit 2,
other failures exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, preset
from .errors import ConfigError, IngestionError, StillflowError

log = logging.getLogger("stillflow")

USAGE_ERRORS = (ConfigError, IngestionError)


def load_config(args) -> RunConfig:
    base = preset(args.preset)
    if args.config:
        return RunConfig.load(args.config, base)
    return base


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise IngestionError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Commands


def cmd_make_toy_assets(args, cfg: RunConfig) -> None:
    from .datasetgen import make_toy_assets

    n = args.scenes or sum(cfg.data.scenes_per_split)
    path = make_toy_assets(args.out, args.seed, n_scenes=n, n_speakers=args.speakers, rate=cfg.data.sample_rate)
    print(path)


def cmd_gen_data(args, cfg: RunConfig) -> None:
    from .datasetgen import RirInventory, generate_corpus

    inv = RirInventory.load(_require(args.inventory, "inventory"))
    ms = generate_corpus(cfg.data, inv, args.seed, args.out, workers=args.workers)
    counts = {s: sum(m.split == s for m in ms) for s in ("train", "val", "test")}
    log.info("wrote %d mixtures %s to %s", len(ms), counts, args.out)


def cmd_train_vae(args, cfg: RunConfig) -> None:
    from .training import train_vae

    _require(Path(args.data) / "index.jsonl", "corpus index")
    res = train_vae(cfg, args.data, args.out, args.seed, args.steps, resume=not args.no_resume)
    log.info("compressor: %d steps, loss %.4f -> %.4f, checkpoint %s", res.steps, res.losses[0],
             res.losses[-1], res.checkpoint)


def cmd_train_flow(args, cfg: RunConfig) -> None:
    from .training import train_flow

    _require(Path(args.data) / "index.jsonl", "corpus index")
    _require(args.compressor, "compressor checkpoint")
    res = train_flow(cfg, args.data, args.compressor, args.out, args.seed, args.steps, resume=not args.no_resume)
    log.info("udit: %d steps, loss %.4f -> %.4f, checkpoint %s", res.steps, res.losses[0], res.losses[-1],
             res.checkpoint)


def cmd_adapt(args, cfg: RunConfig) -> None:
    from .training import adapt

    _require(args.backbone, "backbone checkpoint")
    if args.extend and not args.adapters:
        raise ConfigError("--extend needs --adapters pointing to a prior moelora adapter checkpoint")
    if args.adapters and not args.extend:
        raise ConfigError("--adapters is only used together with --extend")
    extend_from = _require(args.adapters, "adapter checkpoint") if args.extend else None
    res = adapt(cfg, args.backbone, args.data, args.out, args.seed, mode=args.mode, extend_from=extend_from,
                steps=args.steps, resume=not args.no_resume)
    print(f"trainable parameters: {100 * res.trainable_fraction:.3f}%")
    print(f"frozen tensors changed: {len(res.frozen_changed or [])}")


def _wav_files(root: Path, suffix: str) -> dict[str, Path]:
    if root.is_file():
        return {root.name[: -len(suffix)] if root.name.endswith(suffix) else root.stem: root}
    return {str(p.relative_to(root))[: -len(suffix)]: p for p in sorted(root.rglob(f"*{suffix}"))}


class Enhancer:
    """Waveform-in, waveform-out wrapper around compressor + velocity model."""

    def __init__(self, model_path, compressor_path=None, adapters_path=None, steps: int = 50,
                 scheme: str = "euler", seed: int = 0):
        from .flow import LatentScaler, SolverConfig
        from .training import attach_adapters, load_compressor, load_udit

        self.model, meta = load_udit(model_path)
        if adapters_path:
            attach_adapters(self.model, adapters_path)
            self.model.eval()
        self.compressor = load_compressor(compressor_path or meta["compressor"])
        self.scaler = LatentScaler.from_dict(meta["latent_scaler"]) if "latent_scaler" in meta else None
        self.solver = SolverConfig(steps, scheme)
        self.seed = seed
        self.rate = self.compressor.cfg.sample_rate

    def __call__(self, x, key: str = "") -> np.ndarray:
        from .flow import enhance
        from .numeric import Rng

        rng = Rng(self.seed).derive("enhance", key)
        y = enhance(torch.from_numpy(np.asarray(x, np.float32)), self.compressor, self.model, self.solver, rng,
                    self.scaler)
        return y.numpy()


def cmd_enhance(args, cfg: RunConfig) -> None:
    from .evaluation import measure_rtf
    from .signal import read_wav, write_wav

    src = _require(args.input, "input")
    _require(args.model, "model checkpoint")
    enh = Enhancer(args.model, args.compressor, args.adapters, args.steps, cfg.flow.scheme, args.seed)
    files = _wav_files(src, args.suffix)
    if not files:
        raise IngestionError(f"no '*{args.suffix}' files under {src}")
    out = Path(args.out)
    notes, clips = [], []
    for key, path in files.items():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            from scipy.io import wavfile

            rate = wavfile.read(path, mmap=True)[0]
            x, _ = read_wav(path, enh.rate)
        if rate != enh.rate:
            msg = f"{key}: resampled {rate} Hz -> {enh.rate} Hz"
            warnings.warn(msg, stacklevel=1)
            notes.append(msg)
        y = enh(x, key)
        target = out / (key + args.suffix) if src.is_dir() else out / path.name
        write_wav(target, np.clip(y, -1, 1), enh.rate)
        clips.append(x)
        notes.extend(str(w.message) for w in caught if "clipping" in str(w.message))
    report = {"files": len(files), "steps": args.steps, "seed": args.seed, "notes": notes}
    if args.rtf:
        torch.set_num_threads(1)
        report["rtf"] = measure_rtf(lambda c: enh(c), clips, enh.rate, cfg.eval.rtf_repeats)
        log.info("RTF %.4f at %d steps", report["rtf"], args.steps)
    (out / "enhance_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def cmd_eval(args, cfg: RunConfig) -> None:
    from .evaluation import EvalReport, emit_report, evaluate_pair, run_external_scorer
    from .signal import read_wav

    clean = _wav_files(_require(args.clean, "clean directory"), args.clean_suffix)
    est = _wav_files(_require(args.est, "estimate directory"), args.est_suffix)
    keys = sorted(set(clean) & set(est))
    if not keys:
        raise IngestionError(f"no matching clean/estimate pairs between {args.clean} and {args.est}")
    report = EvalReport(config=cfg.to_dict())
    missing = sorted(set(clean) ^ set(est))
    if missing:
        report.notes.append(f"{len(missing)} unpaired files skipped")
    rate = cfg.data.sample_rate
    from scipy.io import wavfile

    for key in keys:
        for p in (clean[key], est[key]):
            r = wavfile.read(p, mmap=True)[0]
            if r != rate:
                report.notes.append(f"{p.name}: resampled {r} Hz -> {rate} Hz")
        c, _ = read_wav(clean[key], rate)
        e, _ = read_wav(est[key], rate)
        report.add(key, evaluate_pair(c, e))
    if cfg.eval.external_scorer:
        pairs = [{"utterance_id": k, "clean": str(clean[k]), "estimate": str(est[k])} for k in keys]
        for row in run_external_scorer(cfg.eval.external_scorer, pairs):
            uid = row.pop("utterance_id")
            report.add(uid, {k: float(v) for k, v in row.items()})
    if args.rtf:
        report.rtf = {"rtf": json.loads(Path(args.rtf).read_text()).get("rtf")}
    csv_path, json_path = emit_report(report, args.report)
    for m, agg in report.aggregates().items():
        print(f"{m}: mean {agg['mean']:.4f} (n={agg['count']})")
    print(json_path)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=("paper", "desk"), default="paper")
    common.add_argument("--config", help="JSON overlay applied on top of the preset")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stillflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stillflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy-assets", parents=[common], help="synthesize a toy RIR/source inventory")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=None)
    s.add_argument("--speakers", type=int, default=12)
    s.set_defaults(func=cmd_make_toy_assets)

    s = sub.add_parser("gen-data", parents=[common], help="build a corpus from an inventory")
    s.add_argument("--inventory", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_gen_data)

    for name, fn in (("train-vae", cmd_train_vae), ("train-flow", cmd_train_flow)):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--steps", type=int, default=None, help="override the configured step count")
        s.add_argument("--no-resume", action="store_true")
        if name == "train-flow":
            s.add_argument("--compressor", required=True)
        s.set_defaults(func=fn)

    s = sub.add_parser("adapt", parents=[common], help="fine-tune a velocity model")
    s.add_argument("--backbone", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("full", "lora", "moelora"), default=None)
    s.add_argument("--extend", action="store_true", help="append one expert to a prior moelora adapter")
    s.add_argument("--adapters", help="prior adapter checkpoint (with --extend)")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("enhance", parents=[common], help="enhance a WAV file or a directory tree")
    s.add_argument("--model", required=True)
    s.add_argument("--compressor", default=None, help="defaults to the path stored in the model checkpoint")
    s.add_argument("--adapters", default=None)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--suffix", default=".wav")
    s.add_argument("--rtf", action="store_true", help="also measure the real-time factor")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", parents=[common], help="score estimates against clean references")
    s.add_argument("--clean", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--report", required=True, help="output path stem (.csv and .json are written)")
    s.add_argument("--clean-suffix", default=".wav")
    s.add_argument("--est-suffix", default=".wav")
    s.add_argument("--rtf", default=None, help="enhance_report.json whose RTF goes into the report")
    s.set_defaults(func=cmd_eval)
    return p


def _artifact_dir(args) -> Path | None:
    if getattr(args, "out", None):
        return Path(args.out)
    if getattr(args, "report", None):
        return Path(args.report).parent
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args)
        out = _artifact_dir(args)
        if out is not None:
            from .training import write_run_config

            write_run_config(out, cfg, {"command": args.command, "seed": args.seed})
        t0 = time.perf_counter()
        args.func(args, cfg)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    except StillflowError as exc:
        print(f"error: {exc.category}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2 if isinstance(exc, USAGE_ERRORS) else 1
    except OSError as exc:
        print(f"error: io: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
