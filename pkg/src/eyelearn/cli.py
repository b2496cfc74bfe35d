"""Command-line entry point.

Exit codes: 0 success, 1 invalid usage or configuration, 2 failure while running.
Every run writes ``resolved_config.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config

log = logging.getLogger("eyelearn")

COMMANDS = ("gen-data", "gen-masks", "train", "embed", "inpaint", "eval-downstream", "eval-robustness", "case-study")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eyelearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override (repeatable)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="seed applied to every rng this command uses")
        p.add_argument("--quiet", action="store_true")
        p.add_argument("--data", help="RNFL dataset container (paths.data)")
        p.add_argument("--masks", help="mask stack .npy (paths.masks)")
        p.add_argument("--checkpoint", help="model checkpoint (paths.checkpoint)")
        p.add_argument("--embeddings", help="embeddings file (paths.embeddings)")
        p.add_argument("--manifest", help="manifest CSV (paths.manifest)")
        p.add_argument("--resume", help="checkpoint to resume training from (paths.resume)")
        p.add_argument("--ids", help="comma-separated image ids for case-study (paths.case_ids)")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.override)
    for flag in ("data", "masks", "checkpoint", "embeddings", "manifest", "resume"):
        value = getattr(args, flag)
        if value:
            overrides.append(f"paths.{flag}={value}")
    if args.ids:
        overrides.append(f"paths.case_ids=[{args.ids}]")
    if args.seed is not None:
        seed_keys = {
            "gen-data": ["data.seed"],
            "gen-masks": ["masks.seed"],
            "train": ["train.model_seed", "train.data_seed", "train.sampling_seed", "masks.seed"],
            "eval-downstream": ["eval.seed"],
            "eval-robustness": ["eval.seed"],
        }.get(args.command, [])
        overrides += [f"{k}={args.seed}" for k in seed_keys]
    cfg = load_config(args.config, overrides)
    cfg.data.validate()
    cfg.arch.validate()
    cfg.train.validate()
    cfg.eval.validate()
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg.paths, name)
        if not value:
            raise ConfigError(f"paths.{name} is required (use --{name})")
        if not Path(value).exists():
            raise ConfigError(f"paths.{name}: {value} does not exist")


def _manifest(cfg: RunConfig, fallback):
    from .dataio import read_manifest

    if cfg.paths.manifest:
        return read_manifest(cfg.paths.manifest)
    if fallback is None:
        raise ConfigError("no manifest: pass --manifest or keep the CSV beside the dataset")
    return fallback


def _validate_inputs(cmd: str, cfg: RunConfig) -> None:
    needs = {
        "train": ("data",),
        "embed": ("checkpoint", "data"),
        "inpaint": ("checkpoint", "data"),
        "eval-downstream": ("embeddings",),
        "eval-robustness": ("checkpoint", "data"),
        "case-study": ("checkpoint", "data"),
    }.get(cmd, ())
    _require(cfg, *needs)
    for optional in ("masks", "manifest", "resume"):
        if getattr(cfg.paths, optional):
            _require(cfg, optional)
    if cmd == "case-study" and len(cfg.paths.case_ids) < 2:
        raise ConfigError("case-study needs at least two ids (--ids)")
    if cmd == "eval-downstream" and not cfg.paths.manifest and not cfg.paths.data:
        raise ConfigError("eval-downstream needs --manifest or --data")


def _run(cmd: str, cfg: RunConfig, out: Path) -> None:
    from . import dataio, evaluation, trainer

    if cmd == "gen-data":
        maps, manifest = dataio.generate_synthetic_dataset(cfg.data)
        dataio.write_dataset(out / "dataset.rnfl", maps, None, manifest)
        log.info("wrote %d maps to %s", len(maps), out / "dataset.rnfl")
    elif cmd == "gen-masks":
        mc = cfg.masks
        pool = dataio.generate_mask_pool(mc.pool_size, cfg.data.width, cfg.data.height, mc.fraction_range, mc.shape_mix, mc.seed)
        np.save(out / "masks.npy", pool)
        log.info("wrote %d masks to %s", len(pool), out / "masks.npy")
    elif cmd == "train":
        maps, _, _ = dataio.read_dataset(cfg.paths.data)
        pool = np.load(cfg.paths.masks) if cfg.paths.masks else None
        trainer.train(maps, pool, cfg.train, cfg.arch, cfg.masks, out_dir=out, resume=cfg.paths.resume or None)
    elif cmd == "embed":
        model = trainer.load_model(cfg.paths.checkpoint)
        maps, _, _ = dataio.read_dataset(cfg.paths.data)
        masks = np.load(cfg.paths.masks) if cfg.paths.masks else None
        ids, emb = trainer.embed_dataset(model, maps, masks)
        trainer.write_embeddings(out / "embeddings.emb", ids, emb)
    elif cmd == "inpaint":
        model = trainer.load_model(cfg.paths.checkpoint)
        maps, stored, manifest = dataio.read_dataset(cfg.paths.data)
        masks = np.load(cfg.paths.masks) if cfg.paths.masks else stored
        fixed = [dataio.ThicknessMap(trainer.inpaint(model, m.pixels, k), m.image_id) for m, k in zip(maps, masks)]
        dataio.write_dataset(out / "inpainted.rnfl", fixed, None, manifest)
    elif cmd == "eval-downstream":
        ids, emb = trainer.read_embeddings(cfg.paths.embeddings)
        fallback = dataio.read_dataset(cfg.paths.data)[2] if cfg.paths.data else None
        report = evaluation.downstream_sweep(ids, emb, _manifest(cfg, fallback), cfg.eval)
        report.write_csv(out / "report.csv")
    elif cmd == "eval-robustness":
        model = trainer.load_model(cfg.paths.checkpoint)
        maps, _, manifest = dataio.read_dataset(cfg.paths.data)
        report = evaluation.artifact_robustness(model, maps, _manifest(cfg, manifest), cfg.eval, mask_seed=cfg.eval.seed)
        report.write_csv(out / "robustness.csv")
    elif cmd == "case-study":
        model = trainer.load_model(cfg.paths.checkpoint)
        maps, stored, _ = dataio.read_dataset(cfg.paths.data)
        masks = np.load(cfg.paths.masks) if cfg.paths.masks else stored
        cs = evaluation.correlation_case_study(model, maps, masks, list(cfg.paths.case_ids))
        evaluation.write_matrix_csv(out / "corr_raw.csv", cs.ids, cs.raw)
        evaluation.write_matrix_csv(out / "corr_embedding.csv", cs.ids, cs.embedded)
        if cs.undefined:
            log.warning("correlation undefined for constant images: %s", cs.undefined)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        _validate_inputs(args.command, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"eyelearn: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("EYELEARN_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "resolved_config.json")
        _run(args.command, cfg, out)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        log.error("%s failed: %s", args.command, exc, exc_info=not args.quiet)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
