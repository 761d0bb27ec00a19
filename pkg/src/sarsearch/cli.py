"""Command-line pipeline: generate data, train, embed, index, query, evaluate.

Configuration comes from an optional JSON file plus per-command flags;
flags win over file values. Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure. Results go to stdout, progress and errors to
stderr. Commands never leave partial outputs: files are written to a
temporary sibling and renamed into place on success.
"""

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import contrastive, datagen, encoder, evaluation
from .errors import (
    DatasetTooSmall,
    DuplicateId,
    EmptyIndex,
    IoError,
    ListTooShort,
    MalformedFile,
    MalformedHeader,
    SarSearchError,
    SizeMismatch,
    SpecTooLarge,
    VersionMismatch,
)
from .index import EmbeddingIndex, PatchRecord
from .raster import read_raster

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (IoError, MalformedHeader, MalformedFile, SizeMismatch,
                VersionMismatch, DatasetTooSmall, DuplicateId, EmptyIndex,
                SpecTooLarge, ListTooShort)


class ConfigError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# --- config loading ----------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def _pick(flag, section: dict, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    if flag is not None:
        return flag
    return section.get(key, default)


def _build_split(cfg: dict, args) -> datagen.SplitSpec:
    sec = _section(cfg, "split")
    seed = _pick(getattr(args, "seed", None), sec, "seed", cfg.get("seed", 0))
    patch = int(_pick(args.patch_size, sec, "patch_size", 64))
    preset = getattr(args, "split", None) or sec.get("preset")
    if preset == "easy":
        rng = (0, patch // 4)
    elif preset == "hard":
        rng = (patch // 2, patch - 1)
    elif preset is None:
        rng = sec.get("query_offset_range", (0, patch // 4))
    else:
        raise ConfigError(f"unknown split preset {preset!r}")
    if args.offset_min is not None or args.offset_max is not None:
        rng = (args.offset_min if args.offset_min is not None else rng[0],
               args.offset_max if args.offset_max is not None else rng[1])
    try:
        spec = datagen.SplitSpec(
            patch_size=patch,
            key_stride=int(_pick(args.stride, sec, "key_stride", 32)),
            n_queries=int(_pick(args.queries, sec, "n_queries", 100)),
            query_offset_range=(int(rng[0]), int(rng[1])),
            seed=int(seed),
        )
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return spec


def _build_arch(cfg: dict, patch_size: int | None = None) -> encoder.EncoderConfig:
    sec = _section(cfg, "encoder")
    try:
        return encoder.EncoderConfig(
            input_size=int(sec.get("input_size", patch_size or 64)),
            channels=tuple(sec.get("channels", (16, 32, 32))),
            dim=int(sec.get("dim", 64)),
            gem_p=float(sec.get("gem_p", 3.0)),
        )
    except (ValueError, SarSearchError) as e:
        raise ConfigError(f"bad encoder config: {e}") from e


def _build_train(cfg: dict, args) -> contrastive.TrainConfig:
    sec = _section(cfg, "train")
    seed = _pick(args.seed, sec, "seed", cfg.get("seed"))
    if seed is None:
        raise ConfigError("training seed is required (--seed or config train.seed)")
    tc = contrastive.TrainConfig(
        seed=int(seed),
        lr=float(_pick(args.lr, sec, "lr", 5e-3)),
        batch_size=int(_pick(args.batch_size, sec, "batch_size", 32)),
        queue_size=int(_pick(args.queue_size, sec, "queue_size", 1024)),
        momentum=float(sec.get("momentum", 0.999)),
        tau=float(sec.get("tau", 0.5)),
        lambda_reg=float(sec.get("lambda_reg", 0.1)),
        max_epochs=int(_pick(args.epochs, sec, "max_epochs", 100)),
        lr_decay_factor=float(sec.get("lr_decay_factor", 0.1)),
        rho=(float(sec["rho"]) if "rho" in sec and sec["rho"] is not None else None),
        optimizer=str(sec.get("optimizer", "adam")),
        early_stop=bool(sec.get("early_stop", False)),
    )
    try:
        tc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return tc


# --- atomic output helpers -----------------------------------------------------


def _atomic_file(final_path, write_fn) -> None:
    """write_fn(tmp_path) then rename tmp over final_path."""
    final_path = Path(final_path)
    if not final_path.parent.is_dir():
        raise IoError(f"output directory {final_path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(dir=final_path.parent,
                               prefix=f".{final_path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, final_path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _atomic_text(final_path, text: str) -> None:
    _atomic_file(final_path, lambda tmp: Path(tmp).write_text(text))


# --- commands ------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _load_config_file(args.config)
    spec = _build_split(cfg, args)
    scene_sec = _section(cfg, "scene")
    seed = int(_pick(args.seed, scene_sec, "seed", cfg.get("seed", 0)))
    width = int(_pick(args.width, scene_sec, "width", 1024))
    height = int(_pick(args.height, scene_sec, "height", 1024))
    name = scene_sec.get("name")

    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise IoError(f"output dir {out} already exists and is not empty")
    if not out.parent.is_dir():
        raise IoError(f"parent directory {out.parent} does not exist")

    scene = datagen.generate_scene(seed, width, height, name=name)
    keys, queries = datagen.extract_patches(scene, spec)
    _log(f"scene {scene.name}: {len(keys)} key patches, {len(queries)} queries "
         f"(offsets {spec.query_offset_range})")

    tmp = out.parent / f".{out.name}.tmp{os.getpid()}"
    try:
        datagen.write_dataset(scene, keys, queries, tmp)
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            import shutil
            shutil.rmtree(tmp, ignore_errors=True)
    print(out / datagen.MANIFEST_NAME)
    return EXIT_OK


def _load_split_patches(data_dir, role: str):
    entries = [e for e in datagen.load_manifest(data_dir) if e.role == role]
    return entries, [datagen.load_patch(data_dir, e) for e in entries]


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    tc = _build_train(cfg, args)

    entries, patches = _load_split_patches(args.data, "key")
    if not entries:
        raise DatasetTooSmall(f"no key patches in {args.data}")
    arch = _build_arch(cfg, patch_size=entries[0].size)
    if arch.input_size != entries[0].size:
        raise ConfigError(
            f"encoder input_size {arch.input_size} != patch size {entries[0].size}")

    init_params = None
    init_opt = None
    start_epoch = 0
    if args.resume:
        init_params = encoder.load_checkpoint(args.resume)
        sidecar = Path(str(args.resume) + ".opt")
        if not sidecar.exists():
            raise IoError(f"resume needs the optimizer sidecar {sidecar}")
        init_opt, start_epoch = contrastive.load_optimizer_state(sidecar, init_params)
        _log(f"resuming from {args.resume} after epoch {start_epoch}")

    result = contrastive.train(
        patches, tc, arch,
        init_params=init_params, init_opt_state=init_opt, start_epoch=start_epoch,
        progress=lambda s: _log(f"epoch {s.epoch:4d}  loss {s.mean_loss:.6f}  lr {s.lr:g}"),
    )

    _atomic_file(args.out, lambda tmp: encoder.save_checkpoint(result.params, tmp))
    _atomic_file(str(args.out) + ".opt",
                 lambda tmp: contrastive.save_optimizer_state(
                     result.opt_state, result.epochs_completed, tmp))
    if args.loss_csv:
        csv = contrastive.history_to_csv(result.history)
        if args.resume and Path(args.loss_csv).exists():
            prev = Path(args.loss_csv).read_text()
            csv = prev + csv.split("\n", 1)[1]
        _atomic_text(args.loss_csv, csv)
    _log(f"trained {len(result.history)} epochs; checkpoint {args.out}")
    print(args.out)
    return EXIT_OK


def _embed_entries(params, data_dir, entries, patches, threads: int):
    def one(img):
        return encoder.forward(params, img)[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vectors = list(ex.map(one, patches))
    else:
        vectors = [one(img) for img in patches]
    return [
        PatchRecord(e.id, e.footprint, v, e.scene)
        for e, v in zip(entries, vectors)
    ]


def cmd_embed(args) -> int:
    params = encoder.load_checkpoint(args.checkpoint)
    entries, patches = _load_split_patches(args.data, "key")
    if not entries:
        raise DatasetTooSmall(f"no key patches in {args.data}")
    if entries[0].size != params.config.input_size:
        raise ConfigError(
            f"checkpoint expects {params.config.input_size}px inputs, "
            f"patches are {entries[0].size}px")

    index = EmbeddingIndex(params.config.dim)
    for rec in _embed_entries(params, args.data, entries, patches, args.threads):
        index.add(rec)
    _atomic_file(args.out, lambda tmp: index.save(tmp))
    _log(f"indexed {len(index)} key patches -> {args.out}")
    print(args.out)
    return EXIT_OK


def cmd_query(args) -> int:
    params = encoder.load_checkpoint(args.checkpoint)
    index = EmbeddingIndex.load(args.index)
    img = read_raster(args.image)
    vec, _ = encoder.forward(params, img)
    results = index.query(vec, k=args.k + (1 if args.exclude_id else 0))
    if args.exclude_id:
        results = [r for r in results if r[0] != args.exclude_id][:args.k]
    for rank, (rid, score) in enumerate(results, start=1):
        print(f"{rank}\t{rid}\t{score:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = encoder.load_checkpoint(args.checkpoint)
    index = EmbeddingIndex.load(args.index)
    entries, patches = _load_split_patches(args.data, "query")
    if not entries:
        raise DatasetTooSmall(f"no query patches in {args.data}")

    records = _embed_entries(params, args.data, entries, patches, args.threads)
    queries = [(r.id, r.footprint, r.vector) for r in records]
    ns = tuple(int(n) for n in args.ns.split(","))
    report = evaluation.evaluate(index, queries, ns=ns,
                                 min_overlap_fraction=args.min_overlap)

    if args.report:
        _atomic_text(args.report, report.to_json() + "\n")
        _log(f"report written to {args.report}")
    print(report.format_table())
    return EXIT_OK


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sarsearch",
        description="Self-supervised SAR-style patch retrieval pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic scene and patch splits")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--split", choices=("easy", "hard"), default=None,
                   help="offset preset; overrides query_offset_range")
    p.add_argument("--offset-min", dest="offset_min", type=int, default=None)
    p.add_argument("--offset-max", dest="offset_max", type=int, default=None)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train the encoder on the key patches")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset directory from datagen")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--queue-size", dest="queue_size", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--loss-csv", dest="loss_csv", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="embed key patches into a searchable index")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="index file to write")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("query", help="retrieve the top-k matches for one image")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--exclude-id", dest="exclude_id", default=None,
                   help="drop this record id from the results")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("eval", help="score retrieval quality of an index")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--report", default=None, help="JSON report file")
    p.add_argument("--ns", default="1,10,50", help="comma-separated precision cutoffs")
    p.add_argument("--min-overlap", dest="min_overlap", type=float, default=0.0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    except _DATA_ERRORS as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except SarSearchError as e:
        _log(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError, KeyError) as e:
        _log(f"data error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
