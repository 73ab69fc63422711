#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py synth-gen --seed 42 --out runs/world
    python cli.py train --store runs/world/store.di2w --encoders runs/world/encoders.json --out runs/train
    python cli.py eval --checkpoint runs/train/checkpoints/final.di2k --store ... --encoders ... --world ...
    python cli.py gradcheck --d 16 --batch 8 --seed 1
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from utils.config import (
    ACTIVATIONS,
    ALIGN_TARGETS,
    CROP_FILTERS,
    CROP_MODES,
    LOG_LEVEL,
    PRECISIONS,
    REPORT_DIR,
    TARGET_FILTERS,
    TASK_KINDS,
    EncoderConfig,
    EvalConfig,
    LossConfig,
    MappingConfig,
    PTCConfig,
    TrainConfig,
    WorldConfig,
    config_hash,
    config_to_dict,
    substream,
)
from utils.embedding_store import CaptionRecord, CropBox, EmbeddingStore, ImageRecord, manifest_path, read_manifest
from utils.encoders import RESERVED_WORDS, FrozenEncoders
from utils.errors import DenoiseError, DimensionMismatchError, InvalidInputError, UnresolvedImageError
from utils.export_utils import (
    export_frame_pdf,
    export_to_csv,
    export_to_excel,
    export_to_json,
    export_to_pdf_report,
    format_report_table,
    get_export_summary,
    plot_crop_sweep,
    sha256_file,
    triplets_to_jsonl,
    write_run_manifest,
)
from utils.pcm import finite_diff_check, init_mapping
from utils.ptc import FilterStats, construct_pseudo_triplets
from utils.retrieval_eval import TemplateKind, evaluate
from utils.synth_world import SynthWorld, generate_world, make_eval_tasks, random_triplets
from utils.trainer import epoch_order, load_checkpoint, train, training_pairs

logger = logging.getLogger(__name__)

STORE_FILE = "store.di2w"
ENCODERS_FILE = "encoders.json"
WORLD_FILE = "world.json"
DEFAULT_SWEEP = "16-32,32-64,64-128,128-256"
NPZ_REQUIRED = ("ids", "embeddings", "caption_embeddings")


# -----------------------------------------------------
# Flag groups
# -----------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    p.add_argument("--out", default=None, help="run directory (default: $DI2W_REPORT_DIR/<command>)")
    p.add_argument("--log-level", default=LOG_LEVEL, help="logging level")


def _add_encoder_args(p: argparse.ArgumentParser, d: int = 32):
    p.add_argument("--d", type=int, default=d, help="embedding dimension")


def _add_world_args(p: argparse.ArgumentParser, image_size: int = 224):
    w = WorldConfig()
    p.add_argument("--concepts", type=int, default=w.concept_count)
    p.add_argument("--styles", type=int, default=w.style_count)
    p.add_argument("--images", type=int, default=w.image_count)
    p.add_argument("--image-size", type=int, default=image_size)
    p.add_argument("--grid", type=int, default=w.grid)
    p.add_argument("--min-concepts", type=int, default=w.concepts_per_image[0])
    p.add_argument("--max-concepts", type=int, default=w.concepts_per_image[1])
    p.add_argument("--coverage", type=float, default=w.coverage)
    p.add_argument("--noise-sigma", type=float, default=w.noise_sigma)
    p.add_argument("--style-scale", type=float, default=w.style_scale)
    p.add_argument("--variant-fraction", type=float, default=w.variant_fraction)
    p.add_argument("--crops-per-image", type=int, default=w.crops_per_image)


def _add_crop_args(p: argparse.ArgumentParser):
    c = PTCConfig()
    p.add_argument("--crop-min", type=int, default=c.crop_min)
    p.add_argument("--crop-max", type=int, default=c.crop_max)
    p.add_argument("--no-center-exclusion", action="store_true")
    p.add_argument("--p-other-crop", type=float, default=c.p_other_crop)
    p.add_argument("--p-other-original", type=float, default=c.p_other_original)
    p.add_argument("--crop-filter", choices=CROP_FILTERS, default=c.crop_filter)
    p.add_argument("--target-filter", choices=TARGET_FILTERS, default=c.target_filter)
    p.add_argument("--no-crops", action="store_true", help="always mine another original as reference")
    p.add_argument("--no-mining", action="store_true", help="always use the image's own crop")
    p.add_argument("--cosine-everywhere", action="store_true")
    p.add_argument("--crop-mode", choices=CROP_MODES, default=c.crop_mode,
                   help="crop candidates or randomly masked images (applied where candidates are generated)")


def _add_train_args(p: argparse.ArgumentParser):
    t, loss, mapping = TrainConfig(), LossConfig(), MappingConfig()
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--warmup", type=int, default=t.warmup_steps)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--steps", type=int, default=t.total_steps)
    p.add_argument("--precision", choices=PRECISIONS, default=t.precision)
    p.add_argument("--checkpoint-every", type=int, default=t.checkpoint_every)
    p.add_argument("--max-skipped-steps", type=int, default=t.max_skipped_steps)
    p.add_argument("--tau", type=float, default=loss.tau)
    p.add_argument("--no-compose", action="store_true", help="drop the compose loss")
    p.add_argument("--no-align", action="store_true", help="drop the alignment loss")
    p.add_argument("--align-target", choices=ALIGN_TARGETS, default=loss.align_target)
    p.add_argument("--connective", default=loss.connective)
    p.add_argument("--hidden-dim", type=int, default=mapping.hidden_dim)
    p.add_argument("--activation", choices=ACTIVATIONS, default=mapping.activation)


def _add_eval_args(p: argparse.ArgumentParser):
    e = EvalConfig()
    p.add_argument("--ks", default=",".join(str(k) for k in e.ks), help="comma-separated Recall@K cut-offs")
    p.add_argument("--max-queries", type=int, default=e.max_queries)
    p.add_argument("--tasks", default=",".join(e.kinds), help="comma-separated task kinds")


def _world_config(args) -> WorldConfig:
    return WorldConfig(
        concept_count=args.concepts, style_count=args.styles, image_count=args.images,
        image_size=args.image_size, grid=args.grid, concepts_per_image=(args.min_concepts, args.max_concepts),
        coverage=args.coverage, noise_sigma=args.noise_sigma, style_scale=args.style_scale,
        variant_fraction=args.variant_fraction, crops_per_image=args.crops_per_image, seed=args.seed,
    )


def _ptc_config(args) -> PTCConfig:
    return PTCConfig(
        crop_min=args.crop_min, crop_max=args.crop_max, center_exclusion=not args.no_center_exclusion,
        p_other_crop=args.p_other_crop, p_other_original=args.p_other_original,
        crop_filter=args.crop_filter, target_filter=args.target_filter,
        use_crops=not args.no_crops, use_mining=not args.no_mining, cosine_everywhere=args.cosine_everywhere,
        crop_mode=args.crop_mode,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay, warmup_steps=args.warmup,
        batch_size=args.batch_size, total_steps=args.steps, seed=args.seed, precision=args.precision,
        checkpoint_every=args.checkpoint_every, max_skipped_steps=args.max_skipped_steps,
        ptc=_ptc_config(args),
        loss=LossConfig(tau=args.tau, use_compose=not args.no_compose, use_align=not args.no_align,
                        align_target=args.align_target, connective=args.connective),
        mapping=MappingConfig(hidden_dim=args.hidden_dim, activation=args.activation),
    )


def _eval_config(args) -> EvalConfig:
    try:
        ks = tuple(int(k) for k in args.ks.split(",") if k.strip())
    except ValueError as e:
        raise InvalidInputError(f"bad --ks value {args.ks!r}") from e
    kinds = tuple(k.strip() for k in args.tasks.split(",") if k.strip())
    return EvalConfig(ks=ks, max_queries=args.max_queries, seed=args.seed, kinds=kinds)


def _run_dir(args) -> str:
    out = args.out or os.path.join(REPORT_DIR, args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _require_file(path: str, flag: str):
    if not os.path.isfile(path):
        raise InvalidInputError(f"{flag} {path!r} does not exist")


def _load_inputs(args):
    _require_file(args.store, "--store")
    _require_file(args.encoders, "--encoders")
    store = EmbeddingStore.load(args.store)
    encoders = FrozenEncoders.load(args.encoders)
    if store.d != encoders.d:
        raise DimensionMismatchError(f"store d={store.d} but encoders d={encoders.d}")
    return store, encoders


# -----------------------------------------------------
# Commands
# -----------------------------------------------------

def cmd_synth_gen(args) -> Dict:
    out = _run_dir(args)
    world_cfg, enc_cfg, ptc_cfg = _world_config(args), EncoderConfig(d=args.d, seed=args.seed), _ptc_config(args)
    world = generate_world(world_cfg, enc_cfg, ptc_cfg)
    store_path = os.path.join(out, STORE_FILE)
    world.store.save(store_path)
    world.encoders.save(os.path.join(out, ENCODERS_FILE))
    world.save_metadata(os.path.join(out, WORLD_FILE))
    artifacts = [store_path, manifest_path(store_path), os.path.join(out, ENCODERS_FILE), os.path.join(out, WORLD_FILE)]
    write_run_manifest(out, "synth-gen",
                       {"world": config_to_dict(world_cfg), "encoder": config_to_dict(enc_cfg),
                        "ptc": config_to_dict(ptc_cfg)},
                       config_hash(world_cfg, enc_cfg, ptc_cfg), artifacts)
    checksum = sha256_file(store_path)
    return {"success": True, "store": store_path, "sha256": checksum,
            "message": f"synth-gen: {len(world.images)} images -> {store_path} sha256={checksum}"}


def cmd_ingest(args) -> Dict:
    """Build a store from an ``.npz`` of embeddings plus a caption manifest (JSON lines)."""
    _require_file(args.embeddings, "--embeddings")
    _require_file(args.manifest, "--manifest")
    out = _run_dir(args)
    with np.load(args.embeddings, allow_pickle=False) as data:
        missing = [key for key in NPZ_REQUIRED if key not in data]
        if missing:
            raise InvalidInputError(f"{args.embeddings} lacks required arrays {missing}")
        ids = [str(i) for i in data["ids"]]
        embeddings = np.asarray(data["embeddings"], dtype=np.float64)
        widths = data["widths"] if "widths" in data else np.full(len(ids), args.image_size)
        heights = data["heights"] if "heights" in data else np.full(len(ids), args.image_size)
        crop_image = data["crop_image"] if "crop_image" in data else np.zeros(0, dtype=int)
        crop_boxes = data["crop_boxes"] if "crop_boxes" in data else np.zeros((0, 4), dtype=int)
        crop_embeddings = data["crop_embeddings"] if "crop_embeddings" in data else np.zeros((0, embeddings.shape[1]))
        caption_embeddings = np.asarray(data["caption_embeddings"], dtype=np.float64)
    if embeddings.ndim != 2 or len(embeddings) != len(ids):
        raise InvalidInputError(f"embeddings of shape {embeddings.shape} do not match {len(ids)} ids")

    crops: Dict[int, List] = {}
    for idx, box, emb in zip(crop_image, crop_boxes, crop_embeddings):
        crops.setdefault(int(idx), []).append((CropBox(*(int(b) for b in box)), emb))
    images = [ImageRecord(image_id, int(w), int(h), emb, crops.get(i, []))
              for i, (image_id, w, h, emb) in enumerate(zip(ids, widths, heights, embeddings))]

    rows = read_manifest(args.manifest)
    if len(rows) != len(caption_embeddings):
        raise InvalidInputError(f"{len(rows)} manifest rows but {len(caption_embeddings)} caption embeddings")
    known = set(ids)
    captions = []
    for line, (row, emb) in enumerate(zip(rows, caption_embeddings), start=1):
        image_id, tokens, text = row.get("id"), row.get("tokens"), row.get("caption")
        if not isinstance(image_id, str):
            raise InvalidInputError(f'manifest line {line} has no string "id"')
        if image_id not in known:
            raise UnresolvedImageError(f"caption references unknown image {image_id!r}")
        captions.append(CaptionRecord(image_id, [int(t) for t in tokens] if isinstance(tokens, list) else [], emb,
                                      text if isinstance(text, str) else ""))

    store = EmbeddingStore(embeddings.shape[1], images, captions)
    store_path = os.path.join(out, STORE_FILE)
    store.save(store_path)
    artifacts = [store_path, manifest_path(store_path)]
    write_run_manifest(out, "ingest", {"embeddings": args.embeddings, "manifest": args.manifest},
                       config_hash({"embeddings": sha256_file(args.embeddings), "manifest": sha256_file(args.manifest)}),
                       artifacts)
    return {"success": True, "store": store_path,
            "message": f"ingest: {len(images)} images, {len(captions)} captions -> {store_path}"}


def cmd_build_triplets(args) -> Dict:
    store, _ = _load_inputs(args)
    out = _run_dir(args)
    ptc_cfg = _ptc_config(args)
    ptc_cfg.validate()
    pairs = training_pairs(store)
    if len(pairs) < args.batch_size:
        raise InvalidInputError(f"{len(pairs)} captioned images cannot fill a batch of {args.batch_size}")
    order = epoch_order(pairs, args.seed, 0)
    stats = FilterStats()
    rows = []
    n_batches = min(args.batches, len(order) // args.batch_size)
    for b in range(n_batches):
        batch = order[b * args.batch_size:(b + 1) * args.batch_size]
        triplets = construct_pseudo_triplets(batch, substream(args.seed, "crop", b), ptc_cfg,
                                             mixture_rng=substream(args.seed, "mixture", b), stats=stats)
        rows.extend(dict(t.to_row(), batch=b) for t in triplets)

    triplet_path = os.path.join(out, "triplets.jsonl")
    stats_path = os.path.join(out, "filter_stats.json")
    with open(triplet_path, "w", encoding="utf-8") as f:
        f.write(triplets_to_jsonl(rows))
    with open(stats_path, "w", encoding="utf-8") as f:
        json.dump(stats.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    write_run_manifest(out, "build-triplets", {"ptc": config_to_dict(ptc_cfg), "batch_size": args.batch_size},
                       config_hash(ptc_cfg), [triplet_path, stats_path])
    summary = stats.to_dict()
    return {"success": True, "stats": summary,
            "message": f"build-triplets: kept {summary['kept']}/{summary['candidates']} "
                       f"({summary['keep_rate']:.3f}) -> {triplet_path}"}


def cmd_train(args) -> Dict:
    store, encoders = _load_inputs(args)
    out = _run_dir(args)
    config = _train_config(args)
    log_path = os.path.join(out, "train_log.jsonl")
    result = train(store, encoders, config, log_path=log_path,
                   checkpoint_dir=os.path.join(out, "checkpoints"), resume_from=args.resume)
    write_run_manifest(out, "train", config_to_dict(config), config_hash(config),
                       [log_path] + result.checkpoints,
                       {"encoder_fingerprint": result.encoder_fingerprint_after,
                        "filter_stats": result.stats.to_dict()})
    losses = [e["l_total"] for e in result.log if not e["skipped"]]
    last = f"{losses[-1]:.6f}" if losses else "n/a"
    return {"success": True, "checkpoint": result.checkpoints[-1],
            "message": f"train: {result.steps_run} steps ({result.skipped_steps} skipped), "
                       f"final l_total={last} -> {result.checkpoints[-1]}"}


def _write_report(report, out: str, name: str) -> List[str]:
    paths = []
    for exporter, mode in ((export_to_json, "w"), (export_to_csv, "w"),
                           (export_to_excel, "wb"), (export_to_pdf_report, "wb")):
        payload, filename = exporter(report, name)
        path = os.path.join(out, filename)
        with open(path, mode, **({"encoding": "utf-8"} if mode == "w" else {})) as f:
            f.write(payload)
        paths.append(path)
    return paths


def cmd_eval(args) -> Dict:
    _require_file(args.checkpoint, "--checkpoint")
    _require_file(args.world, "--world")
    store, encoders = _load_inputs(args)
    out = _run_dir(args)
    eval_cfg = _eval_config(args)
    eval_cfg.validate()
    ckpt = load_checkpoint(args.checkpoint)
    world = SynthWorld.load(args.world, store, encoders)
    tasks = [make_eval_tasks(world, kind, eval_cfg.max_queries, eval_cfg.seed) for kind in eval_cfg.kinds]
    metadata = {"seed": args.seed, "checkpoint": os.path.basename(args.checkpoint),
                "config_hash": config_hash(ckpt.config, eval_cfg), "store_sha256": sha256_file(args.store)}
    report = evaluate(ckpt.params, tasks, encoders, eval_cfg.ks, metadata)
    paths = _write_report(report, out, "eval")
    write_run_manifest(out, "eval", config_to_dict(eval_cfg), metadata["config_hash"], paths)
    summary = get_export_summary(report)
    logger.info(f"Evaluation summary: {summary}")
    return {"success": True, "report": report.to_dict(), "summary": summary,
            "message": "eval:\n" + format_report_table(report) + f"\nbest R@1: {summary.get('Best R@1', 'n/a')}"}


def cmd_gradcheck(args) -> Dict:
    enc_cfg = EncoderConfig(d=args.d, seed=args.seed)
    words = list(RESERVED_WORDS) + [f"word{i}" for i in range(max(8, args.batch))]
    encoders = FrozenEncoders.build(enc_cfg, words)
    triplets = random_triplets(encoders, args.batch, args.seed)
    params = init_mapping(args.d, encoders.token_dim, substream(args.seed, "init"))
    loss_cfg = LossConfig(tau=args.tau)
    which = ("compose", "align", "total") if args.which == "all" else (args.which,)
    reports = [finite_diff_check(params, triplets, encoders, loss_cfg, h=args.h, tolerance=args.tolerance,
                                 which=w, max_coords=args.max_coords, rng=substream(args.seed, "eval"))
               for w in which]
    worst = max(r.max_rel_err for r in reports)
    passed = all(r.passed for r in reports)
    lines = [f"{r.loss}: max_rel_err={r.max_rel_err:.3e} over {r.n_coords} coords" for r in reports]
    lines.append(f"max_rel_err={worst:.3e} {'PASS' if passed else 'FAIL'}")
    return {"success": passed, "max_rel_err": worst, "reports": [r.to_dict() for r in reports],
            "message": "\n".join(lines), "exit_code": 0 if passed else 1}


def _parse_ranges(text: str):
    ranges = []
    for part in text.split(","):
        try:
            lo, hi = (int(v) for v in part.strip().split("-"))
        except ValueError as e:
            raise InvalidInputError(f"bad crop range {part!r}; expected MIN-MAX") from e
        ranges.append((lo, hi))
    return ranges


def cmd_crop_sweep(args) -> Dict:
    """Train and evaluate object composition once per crop range."""
    out = _run_dir(args)
    world_cfg = _world_config(args)
    eval_cfg = _eval_config(args)
    rows = []
    for lo, hi in _parse_ranges(args.ranges):
        config = _train_config(args)
        config.ptc = replace(config.ptc, crop_min=lo, crop_max=hi)
        world = generate_world(world_cfg, EncoderConfig(d=args.d, seed=args.seed), config.ptc)
        result = train(world.store, world.encoders, config)
        task = make_eval_tasks(world, TemplateKind.OBJECT_COMPOSITION, eval_cfg.max_queries, eval_cfg.seed)
        report = evaluate(result.params, [task], world.encoders, eval_cfg.ks)
        row = {"crop_range": f"{lo}-{hi}", "kept": result.stats.kept, "skipped_steps": result.skipped_steps}
        row.update({f"R@{r['k']}": r["recall"] for r in report.rows})
        rows.append(row)
        logger.info(f"crop range {lo}-{hi}: {row}")

    frame = pd.DataFrame(rows)
    csv_path, json_path = os.path.join(out, "sweep.csv"), os.path.join(out, "sweep.json")
    png_path, pdf_path = os.path.join(out, "sweep.png"), os.path.join(out, "sweep.pdf")
    frame.to_csv(csv_path, index=False)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    plot_crop_sweep(frame, png_path, eval_cfg.ks)
    meta = {"seed": args.seed, "config_hash": config_hash(world_cfg, _train_config(args), eval_cfg)}
    with open(pdf_path, "wb") as f:
        f.write(export_frame_pdf(frame, meta, title="Crop Range Sweep"))
    write_run_manifest(out, "crop-sweep", {"world": config_to_dict(world_cfg), "ranges": args.ranges},
                       meta["config_hash"], [csv_path, json_path, png_path, pdf_path])
    best = frame.loc[frame["R@1"].idxmax(), "crop_range"] if "R@1" in frame else "n/a"
    return {"success": True, "rows": rows,
            "message": "crop-sweep:\n" + frame.to_string(index=False) + f"\nbest R@1 range: {best}"}


# -----------------------------------------------------
# Parser and dispatch
# -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Pseudo-triplet image-to-word training toolkit",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth-gen", help="generate a synthetic world and its store", formatter_class=fmt)
    _add_common(p)
    _add_encoder_args(p)
    _add_world_args(p)
    _add_crop_args(p)
    p.set_defaults(handler=cmd_synth_gen)

    p = sub.add_parser("ingest", help="build a store from external embeddings", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--embeddings", required=True, help=".npz with ids, embeddings, caption_embeddings, ...")
    p.add_argument("--manifest", required=True, help="JSON-lines caption manifest (id, caption, tokens)")
    p.add_argument("--image-size", type=int, default=224, help="width/height when the npz has none")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("build-triplets", help="write pseudo triplets and filter statistics", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--encoders", required=True)
    p.add_argument("--batch-size", type=int, default=TrainConfig().batch_size)
    p.add_argument("--batches", type=int, default=10)
    _add_crop_args(p)
    p.set_defaults(handler=cmd_build_triplets)

    p = sub.add_parser("train", help="train the mapping network", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--encoders", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_train_args(p)
    _add_crop_args(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Recall@K on synthetic retrieval tasks", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--encoders", required=True)
    p.add_argument("--world", required=True, help="world metadata JSON from synth-gen")
    _add_eval_args(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients", formatter_class=fmt)
    _add_common(p)
    _add_encoder_args(p, d=16)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--tau", type=float, default=10.0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--which", choices=("all", "compose", "align", "total"), default="all")
    p.add_argument("--max-coords", type=int, default=None)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("crop-sweep", help="train/eval across crop size ranges", formatter_class=fmt)
    _add_common(p)
    _add_encoder_args(p)
    _add_world_args(p, image_size=512)
    _add_train_args(p)
    _add_crop_args(p)
    _add_eval_args(p)
    p.add_argument("--ranges", default=DEFAULT_SWEEP)
    p.set_defaults(handler=cmd_crop_sweep)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run one command, return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        result = args.handler(args)
    except DenoiseError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1

    print(result["message"])
    return result.get("exit_code", 0 if result["success"] else 1)


if __name__ == "__main__":
    sys.exit(run())
