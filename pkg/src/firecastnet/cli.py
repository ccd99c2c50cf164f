"""Command line entry point: ``firecastnet <group> ...``.

Exit status: 0 success, 1 usage error, 2 runtime error.  Every artifact
embeds the resolved run configuration it was produced with.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import tensor as tn

ALLOWED_TS = (6, 12, 24)
ALLOWED_H = (1, 2, 4, 8, 16, 24)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}")


def _frange(text: str) -> tuple[float, float]:
    try:
        a, b = text.replace(",", ":").split(":")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B or A,B, got {text!r}")


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = bitwise reproducible)")

    p = _Parser(prog="firecastnet", description="Global wildfire danger forecasting on a spherical mesh.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    mesh = sub.add_parser("mesh", help="icosahedral multi-mesh tools").add_subparsers(
        dest="action", required=True, parser_class=_Parser
    )
    b = mesh.add_parser("build", parents=[common])
    b.add_argument("--levels", type=int, required=True, help="finest refinement level")
    b.add_argument("--grid", type=_dims, help="attach couplings for an HxW grid")
    b.add_argument("--reduction", type=int, default=4)
    b.add_argument("--out", required=True)
    b = mesh.add_parser("build-lam", parents=[common])
    b.add_argument("--region", required=True, help="SFRM region mask")
    b.add_argument("--fine", type=int, default=6)
    b.add_argument("--coarse", type=int, default=3)
    b.add_argument("--buffer-km", type=_frange, default=(400.0, 800.0), help="MIN,MAX in km")
    b.add_argument("--out", required=True)
    b = mesh.add_parser("stats", parents=[common])
    b.add_argument("path")
    b = mesh.add_parser("couple", parents=[common])
    b.add_argument("--mesh", required=True)
    b.add_argument("--grid", type=_dims, required=True)
    b.add_argument("--reduction", type=int, default=4)
    b.add_argument("--out", required=True)

    data = sub.add_parser("data", help="datacube tools").add_subparsers(
        dest="action", required=True, parser_class=_Parser
    )
    b = data.add_parser("synth", parents=[common])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--years", type=_range, default=(2002, 2019))
    b.add_argument("--h", type=int, default=64)
    b.add_argument("--w", type=int, default=128)
    b.add_argument("--out", required=True)
    b = data.add_parser("stats", parents=[common])
    b.add_argument("path")
    b = data.add_parser("validate", parents=[common])
    b.add_argument("path")
    b = data.add_parser("region", parents=[common], help="rectangular region mask")
    b.add_argument("--cube", required=True)
    b.add_argument("--name", required=True)
    b.add_argument("--lat", type=_frange, required=True)
    b.add_argument("--lon", type=_frange, required=True)
    b.add_argument("--out", required=True)

    b = sub.add_parser("train", parents=[common])
    b.add_argument("--cube", required=True)
    b.add_argument("--mesh", required=True)
    b.add_argument("--ts", type=int, choices=ALLOWED_TS, default=24)
    b.add_argument("--horizon", type=int, choices=ALLOWED_H, default=1)
    b.add_argument("--overlap", type=int, default=None, help="shared steps between windows (default ts-1)")
    b.add_argument("--epochs", type=int, default=50)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--weight-decay", type=float, default=1e-7)
    b.add_argument("--sgdr-cycles", type=int, nargs="+", default=[10, 40])
    b.add_argument("--batch-size", type=int, default=1)
    b.add_argument("--hidden", type=int, default=64, help="embedding and mesh latent width")
    b.add_argument("--layers", type=int, default=12, help="processor layers")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--region", help="SFRM mask; loss restricted to region and land")
    b.add_argument("--out", required=True)
    b.add_argument("--quiet", action="store_true")

    b = sub.add_parser("predict", parents=[common])
    b.add_argument("--ckpt", required=True)
    b.add_argument("--cube", required=True)
    b.add_argument("--mesh", help="defaults to the mesh recorded in the checkpoint")
    b.add_argument("--horizon", type=int, choices=ALLOWED_H)
    b.add_argument("--split", choices=("train", "val", "test"), default="test")
    b.add_argument("--export-map", action="store_true", help="also write 8-bit PGM renderings")
    b.add_argument("--out", required=True)

    b = sub.add_parser("eval", parents=[common])
    b.add_argument("--pred", required=True)
    b.add_argument("--cube", required=True)
    b.add_argument("--regions", nargs="*", default=[])
    b.add_argument("--out", required=True)

    b = sub.add_parser("baseline", parents=[common])
    b.add_argument("--cube", required=True)
    b.add_argument("--kind", choices=("anyfire", "majority"), required=True)
    b.add_argument("--split", choices=("val", "test"), default="test")
    b.add_argument("--regions", nargs="*", default=[])
    b.add_argument("--out", required=True)

    b = sub.add_parser("attribute", parents=[common])
    b.add_argument("--ckpt", required=True)
    b.add_argument("--cube", required=True)
    b.add_argument("--mesh")
    b.add_argument("--horizon", type=int, choices=ALLOWED_H)
    b.add_argument("--steps", type=int, default=200)
    b.add_argument("--sample", type=int, default=0, help="index into the test split")
    b.add_argument("--region", help="SFRM mask for the scalar target")
    b.add_argument("--out", required=True)
    return p


def run_config(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "action")}
    flags = json.loads(json.dumps(flags, sort_keys=True, default=list))
    name = args.command + (f" {args.action}" if getattr(args, "action", None) else "")
    return {"subcommand": name, "flags": flags, "seed": flags.get("seed"), "version": __version__}


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _check_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p


# ---------------------------------------------------------------------------
# mesh


def cmd_mesh(args, cfg) -> int:
    from .coupling import GridSpec, grid_to_mesh_edges, mesh_to_grid_edges
    from .data import load_region
    from .geomesh import build_lam_mesh, build_multimesh, load_mesh, mesh_stats, save_mesh

    if args.action == "stats":
        mesh, couplings = load_mesh(_check_file(args.path))
        stats = mesh_stats(mesh)
        print(f"nodes={mesh.num_nodes} edges={len(mesh.edge_list)} faces={len(mesh.faces)}")
        for lvl, s in sorted(stats["levels"].items()):
            print(f"level {lvl}: " + " ".join(f"{k}={v}" for k, v in s.items()))
        for name, cg in couplings.items():
            size = mesh.num_nodes if cg.direction == "grid2mesh" else cg.grid.num_cells
            deg = cg.in_degree(size)
            print(f"{name}: edges={len(cg.edges)} in_degree min={deg.min()} max={deg.max()}")
        return 0
    if args.action == "build":
        mesh = build_multimesh(args.levels)
        couplings = None
        if args.grid:
            latent = GridSpec.global_grid(*args.grid).coarsen(args.reduction)
            couplings = {
                "grid2mesh": grid_to_mesh_edges(latent, mesh),
                "mesh2grid": mesh_to_grid_edges(latent, mesh),
            }
        save_mesh(mesh, args.out, couplings, metadata={"run_config": cfg})
        print(f"nodes={mesh.num_nodes} edges={len(mesh.edge_list)} -> {args.out}")
        return 0
    if args.action == "build-lam":
        region = load_region(_check_file(args.region))
        grid = GridSpec.global_grid(*region.mask.shape)
        mesh = build_lam_mesh(region, grid, args.fine, args.coarse, args.buffer_km)
        save_mesh(mesh, args.out, metadata={"run_config": cfg})
        print(f"nodes={mesh.num_nodes} edges={len(mesh.edge_list)} faces={len(mesh.faces)} -> {args.out}")
        return 0
    if args.action == "couple":
        mesh, _ = load_mesh(_check_file(args.mesh))
        latent = GridSpec.global_grid(*args.grid).coarsen(args.reduction)
        g2m = grid_to_mesh_edges(latent, mesh)
        m2g = mesh_to_grid_edges(latent, mesh)
        save_mesh(mesh, args.out, {"grid2mesh": g2m, "mesh2grid": m2g}, metadata={"run_config": cfg})
        orphans = int((g2m.in_degree(mesh.num_nodes) == 0).sum())
        m2g_deg = m2g.in_degree(latent.num_cells)
        print(
            f"grid2mesh edges={len(g2m.edges)} orphan_nodes={orphans} "
            f"mesh2grid edges={len(m2g.edges)} in_degree={m2g_deg.min()}..{m2g_deg.max()}"
        )
        return 0
    raise UsageError(f"unknown mesh action {args.action}")


# ---------------------------------------------------------------------------
# data


def cmd_data(args, cfg) -> int:
    from .data import (
        ALL_VARIABLES,
        STATIC_VARIABLES,
        SchemaError,
        load_cube,
        rect_region,
        save_cube,
        save_region,
        synth_cube,
    )

    if args.action == "synth":
        a, b = args.years
        if b < a:
            raise UsageError("--years must be A:B with A <= B")
        slab = synth_cube(args.seed, range(a, b + 1), args.h, args.w)
        save_cube(slab, args.out, metadata={"run_config": cfg})
        print(f"times={slab.num_times} grid={args.h}x{args.w} -> {args.out}")
        return 0
    if args.action == "stats":
        slab = load_cube(_check_file(args.path))
        land = slab.land_mask()
        print(f"times={slab.num_times} grid={slab.grid.height}x{slab.grid.width} land_cells={int(land.sum())}")
        for name in ALL_VARIABLES:
            v = slab.values[name]
            finite = v[np.isfinite(v)]
            mean, std = slab.stats.get(name, (None, None))
            print(
                f"{name}: min={finite.min():.6g} max={finite.max():.6g} "
                f"missing={1 - finite.size / v.size:.4f}"
                + (f" train_mean={mean:.6g} train_std={std:.6g}" if mean is not None else "")
            )
        fire = slab.target_binary()[:, land]
        print(f"fire_prevalence_land={fire.mean():.6f}")
        return 0
    if args.action == "validate":
        slab = load_cube(_check_file(args.path))
        problems = []
        if np.any(np.diff(slab.times.astype(np.int64)) <= 0):
            problems.append("times are not strictly increasing")
        ba = slab.values["gwis_ba"]
        if np.any(ba[np.isfinite(ba)] < 0) or not np.all(np.isfinite(ba)):
            problems.append("gwis_ba must be finite and non-negative")
        lsm = slab.values["lsm"]
        if np.any((lsm < 0) | (lsm > 1)):
            problems.append("lsm outside [0, 1]")
        for name in STATIC_VARIABLES:
            if slab.values[name].ndim != 2:
                problems.append(f"{name} must be static")
        if problems:
            raise SchemaError("; ".join(problems))
        print(f"ok: {args.path} ({slab.num_times} times, {len(slab.variables)} variables)")
        return 0
    if args.action == "region":
        from .data import read_cube_header
        from .coupling import GridSpec

        header = read_cube_header(_check_file(args.cube))
        grid = GridSpec.from_dict(header["grid"])
        region = rect_region(grid, args.name, args.lat, args.lon)
        if region.num_cells == 0:
            raise ValueError("region mask selects no cells")
        save_region(region, args.out)
        print(f"region {args.name}: cells={region.num_cells} -> {args.out}")
        return 0
    raise UsageError(f"unknown data action {args.action}")


# ---------------------------------------------------------------------------
# training and inference


def _load_mesh_graphs(mesh_path, grid, model_cfg):
    from .geomesh import load_mesh
    from .model import ModelError, prepare_graphs

    if mesh_path is None:
        raise FileNotFoundError("no mesh given and none recorded in the checkpoint")
    mesh, couplings = load_mesh(_check_file(mesh_path))
    if mesh.finest_level != model_cfg.mesh_level:
        raise ModelError(
            f"mesh level {mesh.finest_level} does not match the model's level {model_cfg.mesh_level}"
        )
    if grid.height % model_cfg.spatial_reduction or grid.width % model_cfg.spatial_reduction:
        raise ModelError(f"grid {grid.height}x{grid.width} not divisible by {model_cfg.spatial_reduction}")
    return prepare_graphs(mesh, grid, model_cfg, couplings.get("grid2mesh"), couplings.get("mesh2grid"))


def _loss_mask(slab, region_path) -> tuple[np.ndarray, Optional[str]]:
    from .data import load_region

    land = slab.land_mask()
    if region_path is None:
        return land, None
    region = load_region(_check_file(region_path))
    if region.mask.shape != land.shape:
        raise ValueError(f"region mask {region.mask.shape} does not match cube grid {land.shape}")
    return region.mask & land, region.name


def cmd_train(args, cfg) -> int:
    from .data import load_cube, overlap_to_stride, split_by_years, standardize, SampleSet
    from .model import FireCastNetConfig, firecastnet_forward, init_parameters
    from .geomesh import load_mesh
    from .training import TrainConfig, train_loop

    overlap = args.ts - 1 if args.overlap is None else args.overlap
    try:
        stride = overlap_to_stride(args.ts, overlap)
    except ValueError as e:
        raise UsageError(str(e))
    if sum(args.sgdr_cycles) > args.epochs:
        raise UsageError(f"SGDR cycles {args.sgdr_cycles} exceed --epochs {args.epochs}")
    slab = standardize(load_cube(_check_file(args.cube)))
    mask, region_name = _loss_mask(slab, args.region)
    mesh, _ = load_mesh(_check_file(args.mesh))
    model_cfg = FireCastNetConfig(
        ts=args.ts,
        embed_channels=args.hidden,
        mesh_hidden=args.hidden,
        processor_layers=args.layers,
        mesh_level=mesh.finest_level,
    )
    graphs = _load_mesh_graphs(args.mesh, slab.grid, model_cfg)
    tr, va, _ = split_by_years(slab)
    full = SampleSet(slab, args.ts, args.horizon, 1)
    train = SampleSet(slab, args.ts, args.horizon, stride, tr, dynamic=full.dynamic)
    val = full.subset(va)
    state = init_parameters(model_cfg, args.seed)

    def forward(x, training, rng):
        return firecastnet_forward(tn.Tensor(x), graphs, state)

    train_cfg = TrainConfig(
        epochs=args.epochs,
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        sgdr_cycles=tuple(args.sgdr_cycles),
        batch_size=args.batch_size,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", cfg)
    if not args.quiet:
        print(f"train samples={len(train)} val samples={len(val)} params={state.num_parameters()}", file=sys.stderr)
    result = train_loop(state, forward, train, val, train_cfg, mask, out, cfg, verbose=not args.quiet)
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_auprc": result.best_val_auprc,
        "initial_train_loss": result.history[0]["train_loss"],
        "final_train_loss": result.history[-1]["train_loss"],
        "train_samples": len(train),
        "val_samples": len(val),
        "region": region_name,
        "run_config": cfg,
    }
    _write_json(out / "summary.json", summary)
    print(f"best_epoch={result.best_epoch} best_val_auprc={result.best_val_auprc}")
    return 0


def _checkpoint(path):
    from .model import load_checkpoint

    p = Path(path)
    if p.is_dir():
        p = p / "best"
    _check_file(p.with_suffix(".json") if p.suffix not in (".json", ".bin") else p)
    return load_checkpoint(p)


def _prepare_inference(args):
    from .data import load_cube, standardize

    state, manifest = _checkpoint(args.ckpt)
    if state.kind != "firecastnet":
        raise ValueError(f"checkpoint holds a {state.kind} model, expected firecastnet")
    train_flags = manifest.get("run_config", {}).get("flags", {})
    horizon = args.horizon or train_flags.get("horizon", 1)
    slab = standardize(load_cube(_check_file(args.cube)))
    graphs = _load_mesh_graphs(args.mesh or train_flags.get("mesh"), slab.grid, state.config)
    model_id = manifest.get("model_id") or f"firecastnet-{Path(args.ckpt).stem}"
    return state, manifest, slab, graphs, horizon, model_id


def write_pgm(path, probs: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(probs, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_predict(args, cfg) -> int:
    from .data import SampleSet, split_by_years
    from .model import predict_proba

    state, manifest, slab, graphs, horizon, model_id = _prepare_inference(args)
    splits = dict(zip(("train", "val", "test"), split_by_years(slab)))
    samples = SampleSet(slab, state.config.ts, horizon, 1, splits[args.split])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(len(samples)):
        probs = predict_proba(samples.input_at(k), graphs, state).astype(np.float32)
        t = int(samples.targets[k])
        stem = out / str(slab.times[t])
        tn.dump_tensor(probs, stem.with_suffix(".bin"))
        end = int(samples.starts[k]) + state.config.ts - 1
        _write_json(
            stem.with_suffix(".json"),
            {
                "time": str(slab.times[t]),
                "horizon": horizon,
                "model_id": model_id,
                "target_index": t,
                "input_end": str(slab.times[end]),
                "input_end_index": end,
                "shape": list(probs.shape),
                "run_config": cfg,
            },
        )
        if args.export_map:
            write_pgm(stem.with_suffix(".pgm"), probs)
    print(f"wrote {len(samples)} prediction grids to {out}")
    return 0


def read_predictions(pred_dir) -> tuple[list, np.ndarray]:
    d = Path(pred_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no such prediction directory: {pred_dir}")
    metas, grids = [], []
    for side in sorted(d.glob("*.json")):
        meta = json.loads(side.read_text())
        if not {"time", "horizon", "model_id"} <= set(meta):
            raise ValueError(f"{side.name}: sidecar lacks time/horizon/model_id")
        grids.append(tn.load_tensor(side.with_suffix(".bin")))
        metas.append(meta)
    if not metas:
        raise ValueError(f"no prediction files in {pred_dir}")
    return metas, np.stack(grids)


def _regions(paths, shape):
    from .data import load_region

    regions = [load_region(_check_file(p)) for p in paths]
    for r in regions:
        if r.mask.shape != shape:
            raise ValueError(f"region {r.name!r} grid {r.mask.shape} does not match cube {shape}")
    return regions


def cmd_eval(args, cfg) -> int:
    from .data import TRAIN_YEARS, VAL_YEARS, load_cube
    from .metrics import baseline_predictions, evaluate

    metas, grids = read_predictions(args.pred)
    slab = load_cube(_check_file(args.cube))
    index = {str(t): i for i, t in enumerate(slab.times)}
    try:
        targets_idx = np.array([index[m["time"]] for m in metas])
    except KeyError as e:
        raise ValueError(f"prediction time {e.args[0]} not in cube")
    if grids.shape[1:] != slab.land_mask().shape:
        raise ValueError(f"prediction grids {grids.shape[1:]} do not match cube {slab.land_mask().shape}")
    fire = slab.target_binary()
    hist = (TRAIN_YEARS[0], VAL_YEARS[1])
    baselines = {k: baseline_predictions(fire, slab.times, targets_idx, k, hist) for k in ("anyfire", "majority")}
    report = evaluate(
        grids,
        fire[targets_idx],
        slab.land_mask(),
        _regions(args.regions, fire.shape[1:]),
        baselines,
        model_id=metas[0]["model_id"],
        horizon=int(metas[0]["horizon"]),
    )
    report.config = cfg
    _write_json(args.out, report.to_dict())
    g = report.global_pool
    print(f"auprc={g.auprc} anyfire={g.baselines['anyfire']} majority={g.baselines['majority']}")
    return 0


def cmd_baseline(args, cfg) -> int:
    from .data import TRAIN_YEARS, VAL_YEARS, load_cube, split_by_years
    from .metrics import baseline_predictions, evaluate

    slab = load_cube(_check_file(args.cube))
    _, va, te = split_by_years(slab)
    idx = te if args.split == "test" else va
    fire = slab.target_binary()
    hist = (TRAIN_YEARS[0], VAL_YEARS[1]) if args.split == "test" else TRAIN_YEARS
    pred = baseline_predictions(fire, slab.times, idx, args.kind, hist)
    report = evaluate(
        pred.astype(np.float64),
        fire[idx],
        slab.land_mask(),
        _regions(args.regions, fire.shape[1:]),
        model_id=f"naive-{args.kind}",
    )
    report.config = cfg
    _write_json(args.out, report.to_dict())
    print(f"{args.kind} auprc={report.auprc}")
    return 0


def cmd_attribute(args, cfg) -> int:
    from .attribution import aggregate_by_variable, integrated_gradients, masked_mean_sigmoid
    from .data import CHANNELS, SampleSet, split_by_years
    from .model import firecastnet_forward

    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    state, manifest, slab, graphs, horizon, model_id = _prepare_inference(args)
    _, _, te = split_by_years(slab)
    samples = SampleSet(slab, state.config.ts, horizon, 1, te)
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample must be in [0, {len(samples) - 1}]")
    mask, region_name = _loss_mask(slab, args.region)
    fn = masked_mean_sigmoid(lambda x: firecastnet_forward(x, graphs, state), mask)
    ig = integrated_gradients(fn, samples.input_at(args.sample), None, args.steps)
    report = aggregate_by_variable(
        ig.attributions,
        CHANNELS,
        steps=args.steps,
        residual=ig.completeness_residual,
        horizon=horizon,
    )
    report.config = cfg
    payload = report.to_dict()
    payload.update(
        {
            "model_id": model_id,
            "target_time": str(samples[args.sample].target_time),
            "f_input": ig.f_input,
            "f_baseline": ig.f_baseline,
            "region": region_name,
        }
    )
    _write_json(args.out, payload)
    if report.shares:
        top = sorted(report.shares.items(), key=lambda kv: -kv[1])[:3]
        print("top: " + ", ".join(f"{k}={v:.3f}" for k, v in top))
    print(f"completeness_residual={ig.completeness_residual:.3g}")
    return 0


COMMANDS = {
    "mesh": cmd_mesh,
    "data": cmd_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "attribute": cmd_attribute,
}


def resolve_threads(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        value = flag
    elif os.environ.get("FIRECAST_THREADS"):
        try:
            value = int(os.environ["FIRECAST_THREADS"])
        except ValueError:
            raise UsageError("FIRECAST_THREADS must be an integer")
    else:
        return None
    if value < 1:
        raise UsageError("--threads must be >= 1")
    return value


def main(argv: Optional[Sequence[str]] = None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
        threads = resolve_threads(getattr(args, "threads", None))
        args.threads = threads
        cfg = run_config(args)
        print("config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)
        if threads is None:
            return COMMANDS[args.command](args, cfg)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
