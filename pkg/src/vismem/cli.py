"""Command-line interface.

Subcommands: gen-synthetic, build-memory, build-index, retrieve, priors,
refine, pipeline, bench. Exit codes: 0 success, 1 usage error, 2 data or
format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import artifacts, bank as bank_mod, index as index_mod
from .bank import (
    BankBuildConfig,
    EmbeddingProvider,
    HashingProvider,
    load_bank,
    load_embedding_table,
    load_grounding_records,
    save_bank,
    write_pgm,
)
from .errors import InvalidInputError, VismemError
from .grids import Box2D, Point2D
from .index import FlatIndex, ivfpq_add, load_index, save_index, train_ivfpq
from .pipeline import (
    PipelineConfig,
    bench,
    load_config,
    pipeline_report,
    run_pipeline,
)
from .priors import AnchorSet, DensePrior, dense_prior, extract_anchors, radius_cells_to_normalized
from .refine import RefinementParams, load_params, refine_all, save_params
from .retrieval import Prototype, aggregate_prototype, build_query, retrieve
from .synthetic import INPUT_IMAGE_ID, PlantedRegion, ScenarioSpec, gen_synthetic


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _UsageError(Exception):
    """Bad command-line usage (exit code 1), as opposed to runtime failures."""


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file; flags and --set override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")


def _resolve_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if not args.set:
        return config
    values = config.to_dict()
    int_fields = {f.name for f in fields(PipelineConfig) if f.type in (int, "int")}
    for item in args.set:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in values:
            raise _UsageError(f"unknown config key {key!r}")
        try:
            values[key] = int(raw) if key in int_fields else float(raw)
        except ValueError:
            raise _UsageError(f"bad value {raw!r} for config key {key!r}") from None
    return PipelineConfig.from_dict(values)


def _add_provider_args(p: argparse.ArgumentParser):
    p.add_argument("--text-table", help="PMEM file of text embeddings")
    p.add_argument("--image-table", help="PMEM file of image embeddings")
    p.add_argument("--features-dir", help="directory of <image_id>.pgrd feature grids")
    p.add_argument("--hash-key-dim", type=int,
                   help="use the deterministic hashing embedder with this key dim")
    p.add_argument("--hash-val-dim", type=int, help="value dim for the hashing embedder")
    p.add_argument("--hash-seed", type=int, default=0, help="seed for the hashing embedder")
    p.add_argument("--scenario", help="gen-synthetic output dir (implies hashing embedder)")


def _load_features_dir(path) -> dict:
    table = {}
    for name in sorted(os.listdir(path)):
        if name.endswith(".pgrd"):
            table[name[:-5]] = artifacts.load_feature_grid(os.path.join(path, name))
    return table


def _resolve_provider(args) -> EmbeddingProvider:
    if args.scenario:
        with open(os.path.join(args.scenario, "scenario.json"), encoding="utf-8") as f:
            meta = json.load(f)
        features = _load_features_dir(os.path.join(args.scenario, "features"))
        return HashingProvider(d_key=meta["d_key"], d_val=meta["d_val"],
                               seed=meta["seed"], feature_table=features)
    features = _load_features_dir(args.features_dir) if args.features_dir else None
    if args.hash_key_dim:
        if not args.hash_val_dim and not features:
            raise InvalidInputError("--hash-val-dim or --features-dir required")
        d_val = args.hash_val_dim or next(iter(features.values())).shape[2]
        return HashingProvider(d_key=args.hash_key_dim, d_val=d_val,
                               seed=args.hash_seed, feature_table=features)
    text = load_embedding_table(args.text_table) if args.text_table else None
    image = load_embedding_table(args.image_table) if args.image_table else None
    if text is None and image is None and features is None:
        raise InvalidInputError(
            "no embedding source given (use --scenario, --hash-key-dim, or tables)")
    return EmbeddingProvider(text_table=text, image_table=image, feature_table=features)


def _load_any_index(path, bank):
    if path is None:
        return FlatIndex.from_bank(bank)
    return load_index(path)


def _read_categories(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


# --- subcommand implementations ---------------------------------------------

def cmd_gen_synthetic(args) -> int:
    rng = np.random.Generator(np.random.PCG64(args.seed))
    categories = [f"cat-{i}" for i in range(args.categories)]
    from .synthetic import random_regions

    regions = random_regions(args.regions, args.grid_size, args.grid_size,
                             extent=3, min_separation=8.0, rng=rng,
                             categories=categories)
    spec = ScenarioSpec(grid_h=args.grid_size, grid_w=args.grid_size,
                        d_key=args.key_dim, d_val=args.val_dim, regions=regions,
                        noise=args.noise, entries_per_category=args.entries_per_category,
                        distractors=args.distractors, seed=args.seed)
    scenario = gen_synthetic(spec)

    os.makedirs(os.path.join(args.out, "features"), exist_ok=True)
    lines = []
    for rec in scenario.records:
        lines.append(json.dumps({
            "image_id": rec.image_id, "box": rec.box.as_list(),
            "phrase": rec.phrase, "scene": rec.scene,
            "blur_score": rec.blur_score,
        }, sort_keys=True))
    with open(os.path.join(args.out, "records.jsonl"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    for image_id, grid in scenario.provider.feature_table.items():
        artifacts.save_feature_grid(grid, os.path.join(args.out, "features", f"{image_id}.pgrd"))
    with open(os.path.join(args.out, "scenario.json"), "w", encoding="utf-8") as f:
        json.dump({
            "d_key": spec.d_key, "d_val": spec.d_val, "seed": spec.seed,
            "scene": spec.scene, "image_id": INPUT_IMAGE_ID,
            "categories": scenario.categories,
            "gt_centers": {c: [[p.x, p.y] for p in pts]
                           for c, pts in scenario.gt_centers.items()},
        }, f, indent=2, sort_keys=True)
    print(f"wrote scenario with {len(scenario.records)} records to {args.out}")
    return 0


def cmd_build_memory(args) -> int:
    config = _resolve_config(args)
    provider = _resolve_provider(args)
    records_path = args.records or (os.path.join(args.scenario, "records.jsonl")
                                    if args.scenario else None)
    if records_path is None:
        raise InvalidInputError("--records (or --scenario) is required")
    records = load_grounding_records(records_path)
    exclude = frozenset(_read_categories(args.exclude_images)) if args.exclude_images else frozenset()
    built = bank_mod.build_bank(records, provider, BankBuildConfig(
        weights=config.weights(), min_area=config.min_area,
        iou_threshold=config.iou_threshold, drop_fraction=config.drop_fraction,
        exclude_images=exclude,
    ))
    save_bank(built, args.out)
    print(json.dumps(built.manifest, sort_keys=True))
    return 0


def cmd_build_index(args) -> int:
    config = _resolve_config(args)
    memory = load_bank(args.bank)
    index = train_ivfpq(memory.keys_matrix(), config.index_params())
    ivfpq_add(index, np.arange(len(memory)), memory.keys_matrix())
    save_index(index, args.out)
    print(f"trained IVF-PQ index over {len(memory)} keys -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    config = _resolve_config(args)
    memory = load_bank(args.bank)
    provider = _resolve_provider(args)
    index = _load_any_index(args.index, memory)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for category in _read_categories(args.categories):
            query = build_query(provider, category, args.scene, args.image_id,
                                config.weights())
            hits = retrieve(memory, index, query, k=config.k,
                            exclude_image=args.exclude_image,
                            nprobe=config.nprobe, recall_size=config.recall_size)
            proto = aggregate_prototype(memory, hits, query, tau=config.tau_p)
            out.write(json.dumps({
                "category": category,
                "hits": [{"entry_id": h.entry_id, "score": h.score} for h in hits],
                "prototype": [float(v) for v in proto.vector],
            }, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_priors(args) -> int:
    config = _resolve_config(args)
    grid = artifacts.load_feature_grid(args.grid)
    with open(args.prototype, encoding="utf-8") as f:
        proto_obj = json.loads(f.readline())
    proto = Prototype(
        category=proto_obj["category"],
        vector=np.asarray(proto_obj["prototype"], dtype=np.float32),
        neighbors=[(h["entry_id"], h["score"], 0.0) for h in proto_obj.get("hits", [])],
        tau=config.tau_p,
    )
    prior = dense_prior(grid, proto, sigma=config.sigma)
    radius = radius_cells_to_normalized(config.radius_cells, *prior.heatmap.shape)
    anchors = extract_anchors(prior, threshold=config.peak_threshold,
                              radius=radius, max_anchors=config.max_anchors)
    artifacts.save_scalar_map(prior.heatmap, args.out_heatmap)
    if args.out_pgm:
        write_pgm(prior.heatmap, args.out_pgm)
    with open(args.out_anchors, "w", encoding="utf-8") as f:
        for point, resp in anchors.anchors:
            f.write(json.dumps({"x": point.x, "y": point.y, "response": resp,
                                "category": anchors.category}, sort_keys=True) + "\n")
    print(f"{len(anchors)} anchors for {proto.category!r}")
    return 0


def cmd_refine(args) -> int:
    scales = [artifacts.load_feature_grid(p) for p in args.grids]
    heat = artifacts.load_scalar_map(args.heatmap)
    params = load_params(args.params)
    anchors = []
    category = args.category
    with open(args.anchors, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                anchors.append((Point2D(obj["x"], obj["y"]), obj["response"]))
                category = category or obj.get("category")
    anchor_set = AnchorSet(category=category or "", anchors=anchors)
    prior = DensePrior(category=anchor_set.category, heatmap=heat, sigma=0.0)
    prompts = refine_all(scales, prior, anchor_set, params, anchor_set.category)
    if prompts:
        artifacts.save_vectors(np.stack([p.embedding for p in prompts]), args.out_prompts)
    else:
        artifacts.save_vectors(np.zeros((0, 0), dtype=np.float32), args.out_prompts)
    with open(args.out_sidecar, "w", encoding="utf-8") as f:
        for p in prompts:
            f.write(json.dumps({
                "category": p.source_category, "x": p.anchor.x, "y": p.anchor.y,
                "scale": p.scale_index,
            }, sort_keys=True) + "\n")
    print(f"{len(prompts)} prompts")
    return 0


def cmd_pipeline(args) -> int:
    config = _resolve_config(args)
    memory = load_bank(args.bank)
    provider = _resolve_provider(args)
    index = _load_any_index(args.index, memory)
    if args.params:
        params = load_params(args.params)
    else:
        params = RefinementParams.zero_init(memory.d_val, window=config.window)
    image_id = args.image_id
    scene = args.scene
    if args.scenario and not args.categories:
        with open(os.path.join(args.scenario, "scenario.json"), encoding="utf-8") as f:
            meta = json.load(f)
        categories = meta["categories"]
        image_id = image_id or meta["image_id"]
        scene = scene if scene is not None else meta["scene"]
    else:
        categories = _read_categories(args.categories)
    if image_id is None:
        raise InvalidInputError("--image-id is required without --scenario")
    results = run_pipeline(config, memory, index, provider, image_id, categories,
                           params, scene=scene or "",
                           exclude_image=args.exclude_image)
    report = pipeline_report(config, results, image_id)
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        from .serial import atomic_write_bytes

        atomic_write_bytes(args.report, payload.encode("utf-8"))
    else:
        print(payload)
    return 0


def cmd_bench(args) -> int:
    config = _resolve_config(args)
    memory = load_bank(args.bank)
    index = _load_any_index(args.index, memory)
    report = bench(memory, index, query_count=args.queries, seed=config.seed,
                   k=config.k, nprobe=config.nprobe, recall_size=config.recall_size)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    epilog = "config defaults: " + ", ".join(
        f"{f.name}={getattr(PipelineConfig(), f.name)}" for f in fields(PipelineConfig))
    parser = _Parser(prog="vismem", description=__doc__, epilog=epilog)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a deterministic synthetic scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-size", type=int, default=32)
    p.add_argument("--key-dim", type=int, default=64)
    p.add_argument("--val-dim", type=int, default=32)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--regions", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--entries-per-category", type=int, default=20)
    p.add_argument("--distractors", type=int, default=50)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-memory", help="build and save a memory bank")
    _add_config_args(p)
    _add_provider_args(p)
    p.add_argument("--records", help="grounding records JSONL")
    p.add_argument("--exclude-images", help="file of image ids to exclude, one per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_memory)

    p = sub.add_parser("build-index", help="train an IVF-PQ index over a bank")
    _add_config_args(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="retrieve per-category hits and prototypes")
    _add_config_args(p)
    _add_provider_args(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--index", help="IVF-PQ index file; exact flat search if omitted")
    p.add_argument("--categories", required=True, help="file with one category per line")
    p.add_argument("--scene", default="")
    p.add_argument("--image-id", required=True)
    p.add_argument("--exclude-image")
    p.add_argument("--out", help="output JSONL (stdout if omitted)")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("priors", help="dense heatmap prior + sparse anchors")
    _add_config_args(p)
    p.add_argument("--grid", required=True, help="input feature grid (.pgrd)")
    p.add_argument("--prototype", required=True,
                   help="JSON(L) file from retrieve with category and prototype")
    p.add_argument("--out-heatmap", required=True, help="output raster (.pmap)")
    p.add_argument("--out-pgm", help="optional PGM rendering")
    p.add_argument("--out-anchors", required=True, help="output anchors JSONL")
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("refine", help="memory-guided prompt refinement")
    p.add_argument("--grids", required=True, nargs="+", help="feature scales (.pgrd)")
    p.add_argument("--heatmap", required=True, help="dense prior raster (.pmap)")
    p.add_argument("--anchors", required=True, help="anchors JSONL")
    p.add_argument("--params", required=True, help="refinement parameters (.pprm)")
    p.add_argument("--category")
    p.add_argument("--out-prompts", required=True, help="output vectors (.pvec)")
    p.add_argument("--out-sidecar", required=True, help="output JSONL sidecar")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("pipeline", help="full per-image pipeline with JSON report")
    _add_config_args(p)
    _add_provider_args(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--index", help="IVF-PQ index file; exact flat search if omitted")
    p.add_argument("--categories", help="file with one category per line")
    p.add_argument("--scene")
    p.add_argument("--image-id")
    p.add_argument("--exclude-image")
    p.add_argument("--params", help="refinement parameters (.pprm); zero init if omitted")
    p.add_argument("--report", help="write the JSON report here (stdout if omitted)")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bench", help="queries/second and recall@K vs the flat oracle")
    _add_config_args(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--index", help="IVF-PQ index file; times flat search if omitted")
    p.add_argument("--queries", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VismemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
