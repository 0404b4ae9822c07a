"""``sfuda3d`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from sfuda3d import config as config_mod
from sfuda3d.adapt import ABLATIONS, IoAudit, adapt, crop_latents, estimate_boundary, extract_gmm_library, train_source
from sfuda3d.data.crops import crop_grid
from sfuda3d.data.dataset import MANIFEST_NAME, generate_dataset
from sfuda3d.data.volume import Manifest, load_images, load_pairs
from sfuda3d.evaluate import evaluate
from sfuda3d.exceptions import ConfigError, DataError, LibraryCorruptionError, NumericalError, ParameterError
from sfuda3d.gmm import load_library, save_library
from sfuda3d.model import build_model, file_hash, load_checkpoint, save_checkpoint
from sfuda3d.rng import subsystem_seed

log = logging.getLogger("sfuda3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _manifest(cfg: config_mod.RunConfig) -> Manifest:
    return Manifest.read(Path(cfg.paths.data_dir) / MANIFEST_NAME)


def _select(cfg, modality: str, split: str):
    entries = _manifest(cfg).select(modality, split)
    if not entries:
        raise DataError(f"manifest has no {modality}/{split} volumes")
    return entries


def _write_trace(path: Path, header: str, values, times) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", header, "wall_time"))
        for i, (v, t) in enumerate(zip(values, times)):
            writer.writerow((i + 1, repr(float(v)), f"{t:.3f}"))


def cmd_gen_data(cfg: config_mod.RunConfig, args) -> None:
    manifest = generate_dataset(cfg.paths.data_dir, cfg.seed, cfg.data.n_train, cfg.data.n_test,
                                (cfg.source_modality, cfg.target_modality), cfg.data.shape)
    log.info("wrote %d volumes to %s", len(manifest.entries), cfg.paths.data_dir)


def cmd_train_source(cfg: config_mod.RunConfig, args) -> None:
    entries = _select(cfg, cfg.source_modality, "train")
    m = cfg.model
    model = build_model(m.num_classes, subsystem_seed(cfg.seed, "init"), m.widths, m.dilations)
    result = train_source(model, entries, dataclasses.replace(cfg.train, seed=cfg.seed))
    model.metadata.update(seed=cfg.seed, loss_curve=result.loss_curve)
    path = Path(cfg.paths.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    _write_trace(Path(cfg.paths.report_dir) / "train_trace.csv", "mean_ce", result.loss_curve, result.wall_times)
    log.info("checkpoint %s (%s), loss %.4f -> %.4f", path, file_hash(path), result.loss_curve[0], result.loss_curve[-1])


def cmd_extract_gmms(cfg: config_mod.RunConfig, args) -> None:
    ckpt = Path(cfg.paths.checkpoint)
    model = load_checkpoint(ckpt)
    entries = _select(cfg, cfg.source_modality, "train")
    lib = extract_gmm_library(model, entries, cfg.adapt.stride, cfg.adapt.patch, checkpoint_hash=file_hash(ckpt))
    path = Path(cfg.paths.library)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_library(lib, path)
    log.info("library %s with %d entries", path, len(lib))


def _export_latents(path: Path, before, after, frozen, image, patch: int) -> None:
    crop = crop_grid(image.shape, patch, patch)[0].slices()
    x = image[crop]
    np.savez(path, before=crop_latents(before, x), after=crop_latents(after, x),
             boundary=estimate_boundary(frozen, x).labels)


def cmd_adapt(cfg: config_mod.RunConfig, args) -> None:
    report = Path(cfg.paths.report_dir)
    report.mkdir(parents=True, exist_ok=True)
    audit = IoAudit()
    with audit.record():
        ckpt = Path(cfg.paths.checkpoint)
        source = load_checkpoint(ckpt)
        lib = load_library(cfg.paths.library)
        if lib.checkpoint_hash != file_hash(ckpt):
            raise LibraryCorruptionError("library was extracted from a different checkpoint")
        entries = _select(cfg, cfg.target_modality, "train")
        images = load_images(entries)
        model, frozen = source.copy(), source.copy()
        acfg = dataclasses.replace(cfg.adapt, seed=cfg.seed)
        result = adapt(model, frozen, images, lib, acfg)
        model.metadata.update(adapted_from=file_hash(ckpt), ablation=acfg.ablation, swd_trace=result.swd_trace)
        out = Path(cfg.paths.adapted)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out)
        _write_trace(report / "adapt_trace.csv", "mean_swd", result.swd_trace, result.wall_times)
        trace = result.swd_trace
        metrics = {"ablation": acfg.ablation, "library_entries": len(lib), "swd_first": trace[0] if trace else None,
                   "swd_last": trace[-1] if trace else None, "adapted_checkpoint": file_hash(out)}
        (report / "adapt_metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
        if args.export_latents:
            _export_latents(Path(args.export_latents), source, model, frozen, images[0], acfg.patch)
    (report / "audit.log").write_text("".join(p + "\n" for p in audit.paths), encoding="utf-8")
    log.info("adapted checkpoint %s; swd %s -> %s", out, metrics["swd_first"], metrics["swd_last"])


def cmd_evaluate(cfg: config_mod.RunConfig, args) -> None:
    ckpt = Path(args.checkpoint or cfg.paths.adapted)
    model = load_checkpoint(ckpt)
    modality = args.modality or cfg.target_modality
    entries = _select(cfg, modality, args.split)
    data = load_pairs(entries)
    ids = [e.id for e in entries]
    tag = args.tag or ckpt.stem
    for stride in cfg.eval_strides:
        rep = evaluate(model, data, cfg.eval_patch, stride, ids)
        stem = Path(cfg.paths.report_dir) / f"dice_{tag}_{modality}_s{'x'.join(map(str, rep.stride))}"
        rep.write(stem)
        log.info("stride %s: avg Dice %.4f", rep.stride, rep.average)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "extract-gmms": cmd_extract_gmms,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfuda3d", description="Source-free 3D segmentation adaptation pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. adapt.lr=1e-4")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir")
    common.add_argument("--report-dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "adapt":
            p.add_argument("--ablation", choices=ABLATIONS)
            p.add_argument("--export-latents", metavar="PATH", help="write an .npz of latent points for plotting")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="model to evaluate (default: the adapted checkpoint)")
            p.add_argument("--modality")
            p.add_argument("--split", default="test")
            p.add_argument("--tag")
    sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    return parser


def resolve_config(args) -> config_mod.RunConfig:
    payload = {}
    if args.config:
        payload = json.loads(json.dumps(config_mod.load(args.config).to_dict()))
    for assignment in args.overrides:
        config_mod.apply_override(payload, assignment)
    flags = {"seed": args.seed, "paths.data_dir": args.data_dir, "paths.report_dir": args.report_dir,
             "adapt.ablation": getattr(args, "ablation", None)}
    for key, value in flags.items():
        if value is not None:
            config_mod.apply_override(payload, f"{key}={json.dumps(value)}")
    return config_mod.from_dict(payload)


def _threads():
    raw = os.environ.get("SFUDA3D_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"SFUDA3D_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("SFUDA3D_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "print-config":
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        with threadpool_limits(limits=_threads()):
            start = time.perf_counter()
            COMMANDS[args.command](cfg, args)
            log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    except (ConfigError, ParameterError) as exc:
        print(f"sfuda3d: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LibraryCorruptionError, OSError) as exc:
        print(f"sfuda3d: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"sfuda3d: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
