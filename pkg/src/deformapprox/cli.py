"""Command-line entry point wiring rig generation, extraction, training,
evaluation, and benchmarking.

Only stdlib imports at module level: DEFORMAPPROX_THREADS must be applied
to the BLAS thread environment before numpy is first imported, so all
pipeline modules load lazily inside the command functions.

Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
Progress goes to stderr; machine-readable output goes to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path


def _apply_thread_env() -> None:
    count = os.environ.get("DEFORMAPPROX_THREADS")
    if count:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, count)


_apply_thread_env()

logger = logging.getLogger("deformapprox")


class ConfigError(ValueError):
    pass


_SECTION_KEYS = {
    "rig": {"kind", "segments", "radial", "grid", "bumps", "path", "mesh_path"},
    "dataset": {"path", "frames", "mode", "seed", "frame_rate"},
    "split": {"stride", "offset"},
    "model": {"path", "checkpoint_dir", "checkpoint_every", "hidden",
              "subspace_hidden", "lr", "epochs", "seed", "pca_variance",
              "pca_max_components", "pca_components", "group_size",
              "anchor_fraction", "n_groups", "anchor_weight"},
    "ensemble": {"k", "base_seed", "dir"},
    "bench": {"reps", "warmup", "batch", "frames", "truth_cost_multiplier",
              "csv", "markdown"},
    "report": {"dir", "percentile"},
}

_DEFAULTS = {
    "rig": {"kind": "arm", "segments": 20, "radial": 12, "grid": 24, "bumps": 6,
            "path": "rig.json", "mesh_path": None},
    "dataset": {"path": "frames.dataset", "frames": 240, "mode": "clip",
                "seed": 0, "frame_rate": 24.0},
    "split": {"stride": 10, "offset": 0},
    "model": {"path": "model.daxb", "checkpoint_dir": None, "checkpoint_every": 0,
              "hidden": [256, 128], "subspace_hidden": [64], "lr": 1e-3,
              "epochs": 5000, "seed": 0, "pca_variance": 0.999,
              "pca_max_components": 128, "pca_components": 0, "group_size": 4,
              "anchor_fraction": 0.05, "n_groups": 0, "anchor_weight": 1.0},
    "ensemble": {"k": 5, "base_seed": 0, "dir": "ensemble"},
    "bench": {"reps": 3, "warmup": 10, "batch": 0, "frames": 0,
              "truth_cost_multiplier": 1, "csv": "bench.csv",
              "markdown": "bench.md"},
    "report": {"dir": "report", "percentile": 99.0},
}


@dataclass
class PipelineConfig:
    base_dir: Path
    sections: dict

    def section(self, name: str) -> dict:
        return self.sections[name]

    def resolve(self, relative) -> Path:
        return (self.base_dir / relative).resolve()


def load_config(path) -> PipelineConfig:
    """Parse and validate the pipeline config; unknown keys are rejected so
    typos fail loudly.  All paths are taken relative to the config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - set(_SECTION_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    sections = {}
    for name, allowed in _SECTION_KEYS.items():
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: section {name!r} must be an object")
        bad = set(given) - allowed
        if bad:
            raise ConfigError(f"{path}: unknown keys in {name!r}: {sorted(bad)}")
        merged = dict(_DEFAULTS[name])
        merged.update(given)
        sections[name] = merged
    return PipelineConfig(path.parent.resolve(), sections)


# --- shared pipeline steps -------------------------------------------------


def _make_rig(kind: str, rig_cfg: dict):
    from .synthrig import generate_arm_rig, generate_face_rig

    if kind == "arm":
        return generate_arm_rig(int(rig_cfg["segments"]), int(rig_cfg["radial"]))
    if kind == "face":
        return generate_face_rig(int(rig_cfg["grid"]), int(rig_cfg["bumps"]))
    raise ConfigError(f"unknown rig kind {kind!r} (expected arm or face)")


def _load_or_generate_rig(cfg: PipelineConfig):
    from .synthrig import load_rig, save_rig

    rig_cfg = cfg.section("rig")
    rig_path = cfg.resolve(rig_cfg["path"])
    if rig_path.exists():
        logger.info("loading rig %s", rig_path)
        return load_rig(rig_path)
    rig = _make_rig(rig_cfg["kind"], rig_cfg)
    mesh_path = rig_cfg["mesh_path"]
    mesh_path = cfg.resolve(mesh_path) if mesh_path else rig_path.with_suffix(".obj")
    rig_path.parent.mkdir(parents=True, exist_ok=True)
    save_rig(rig, rig_path, mesh_path)
    logger.info("generated %s rig: %s", rig.kind, rig_path)
    return rig


def _deformer_config(cfg: PipelineConfig, rig, fields):
    from .deformer import DeformerConfig

    m = cfg.section("model")
    return DeformerConfig(
        mesh=rig.rest_mesh,
        fields=fields,
        hidden=tuple(int(h) for h in m["hidden"]),
        subspace_hidden=tuple(int(h) for h in m["subspace_hidden"]),
        lr=float(m["lr"]),
        epochs=int(m["epochs"]),
        seed=int(m["seed"]),
        pca_variance=float(m["pca_variance"]),
        pca_max_components=int(m["pca_max_components"]),
        pca_components=int(m["pca_components"]),
        group_size=int(m["group_size"]),
        anchor_fraction=float(m["anchor_fraction"]),
        n_groups=int(m["n_groups"]),
        anchor_weight=float(m["anchor_weight"]),
    )


def _split_pair(cfg: PipelineConfig):
    s = cfg.section("split")
    return int(s["stride"]), int(s["offset"])


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path} ({hint})")
    return path


# --- commands --------------------------------------------------------------


def cmd_rig_gen(args) -> int:
    from .synthrig import save_rig

    rig_cfg = dict(_DEFAULTS["rig"])
    for key in ("segments", "radial", "grid", "bumps"):
        value = getattr(args, key)
        if value is not None:
            rig_cfg[key] = value
    rig = _make_rig(args.kind, rig_cfg)
    out = Path(args.out)
    mesh_path = Path(args.mesh) if args.mesh else out.with_suffix(".obj")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rig(rig, out, mesh_path)
    logger.info("wrote %s and %s (%d vertices)", out, mesh_path,
                rig.rest_mesh.vertex_count)
    return 0


def cmd_extract(args) -> int:
    from .dataset import append_frames, extract_dataset, write_dataset
    from .synthrig import sample_animation

    cfg = load_config(args.config)
    rig = _load_or_generate_rig(cfg)
    d = cfg.section("dataset")
    seq = sample_animation(rig, int(d["frames"]), d["mode"], int(d["seed"]),
                           float(d["frame_rate"]))
    ds = extract_dataset(rig, seq)
    out = cfg.resolve(d["path"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.append and out.exists():
        append_frames(out, ds)
        logger.info("appended %d frames to %s", ds.frame_count, out)
    else:
        write_dataset(ds, out)
        logger.info("wrote %d frames to %s", ds.frame_count, out)
    return 0


def cmd_train(args) -> int:
    from .dataset import read_dataset
    from .deformer import save_bundle, train_deformer
    from .uncertainty import save_ensemble, train_ensemble

    cfg = load_config(args.config)
    rig = _load_or_generate_rig(cfg)
    ds = read_dataset(_require(cfg.resolve(cfg.section("dataset")["path"]),
                               "run extract first"))
    dconf = _deformer_config(cfg, rig, ds.fields)
    split = _split_pair(cfg)
    m = cfg.section("model")
    ckpt = cfg.resolve(m["checkpoint_dir"]) if m["checkpoint_dir"] else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    if args.ensemble:
        e = cfg.section("ensemble")
        ens = train_ensemble(dconf, ds, split, int(e["k"]), int(e["base_seed"]),
                             checkpoint_dir=ckpt, resume=args.resume)
        out_dir = cfg.resolve(e["dir"])
        save_ensemble(ens, out_dir)
        logger.info("wrote %d ensemble members to %s", len(ens), out_dir)
    else:
        bundle = train_deformer(dconf, ds, split, checkpoint_dir=ckpt,
                                resume=args.resume,
                                checkpoint_every=int(m["checkpoint_every"]))
        out = cfg.resolve(m["path"])
        out.parent.mkdir(parents=True, exist_ok=True)
        save_bundle(bundle, out)
        logger.info("wrote model bundle %s", out)
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .dataset import read_dataset, split_indices
    from .deformer import evaluate, infer, load_bundle
    from .figures import save_error_curve, save_error_histogram, save_loss_curve
    from .meshcore import TriMesh
    from .neural import load_checkpoint
    from .report import HeatmapSpec, error_field, export_heatmap, export_metrics
    from .uncertainty import load_ensemble, predict_with_uncertainty

    cfg = load_config(args.config)
    rig = _load_or_generate_rig(cfg)
    ds = read_dataset(_require(cfg.resolve(cfg.section("dataset")["path"]),
                               "run extract first"))
    bundle = load_bundle(_require(cfg.resolve(cfg.section("model")["path"]),
                                  "run train first"))
    stride, offset = _split_pair(cfg)
    train_idx, val_idx = split_indices(ds.frame_count, stride, offset)

    out_dir = cfg.resolve(cfg.section("report")["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = HeatmapSpec(percentile=float(cfg.section("report")["percentile"]))

    train_rows, train_sum = evaluate(bundle, ds, train_idx)
    val_rows, val_sum = evaluate(bundle, ds, val_idx)
    export_metrics(train_rows + [train_sum], out_dir / "metrics_train.csv")
    export_metrics(val_rows + [val_sum], out_dir / "metrics_val.csv")
    logger.info("train rmse %.6g, validation rmse %.6g",
                train_sum.rmse, val_sum.rmse)

    # heat map of the worst validation frame
    worst = val_idx[int(np.argmax([r.rmse for r in val_rows]))]
    pred = infer(bundle, ds.inputs[worst], ds.linear[worst])
    field = error_field(pred, ds.final[worst])
    mesh = TriMesh(pred, rig.rest_mesh.triangles)
    export_heatmap(mesh, field, spec, out_dir / "error_heatmap.ply")

    save_error_curve(val_rows, out_dir / "error_curve.png",
                     label=f"validation error (worst frame {int(worst)})")
    save_error_histogram(field, out_dir / "error_histogram.png")
    ckpt_dir = cfg.section("model")["checkpoint_dir"]
    if ckpt_dir:
        diff_ckpt = cfg.resolve(ckpt_dir) / "diff.daxm"
        if diff_ckpt.exists():
            save_loss_curve(load_checkpoint(diff_ckpt).loss_history,
                            out_dir / "loss_curve.png")

    if args.uncertainty:
        ens = load_ensemble(cfg.resolve(cfg.section("ensemble")["dir"]))
        mean_pos, unc = predict_with_uncertainty(ens, ds.inputs[worst],
                                                 ds.linear[worst])
        export_heatmap(TriMesh(mean_pos, rig.rest_mesh.triangles), unc, spec,
                       out_dir / "uncertainty_heatmap.ply")
        logger.info("mean uncertainty on frame %d: %.6g", int(worst),
                    float(unc.mean()))
    logger.info("evaluation artifacts in %s", out_dir)
    return 0


def cmd_bench(args) -> int:
    from .bench import (bench_batch, compare_pipelines, reports_to_csv,
                        reports_to_markdown, time_inference)
    from .dataset import read_dataset
    from .deformer import load_bundle
    from .figures import save_timing_bars
    from .synthrig import sample_animation

    cfg = load_config(args.config)
    rig = _load_or_generate_rig(cfg)
    ds = read_dataset(_require(cfg.resolve(cfg.section("dataset")["path"]),
                               "run extract first"))
    bundle = load_bundle(_require(cfg.resolve(cfg.section("model")["path"]),
                                  "run train first"))
    b = cfg.section("bench")
    reps, warmup = int(b["reps"]), int(b["warmup"])
    frames = int(b["frames"]) or min(ds.frame_count, 60)
    seq = sample_animation(rig, frames, "clip")

    reports = [time_inference(bundle, ds, reps=reps, warmup=warmup,
                              frames=range(min(frames, ds.frame_count)))]
    comparison = compare_pipelines(rig, bundle, seq, reps=reps,
                                   warmup=min(warmup, 3),
                                   truth_cost_multiplier=int(b["truth_cost_multiplier"]))
    reports.extend([comparison.truth, comparison.approx])
    batch_c = args.batch if args.batch is not None else int(b["batch"])
    if batch_c:
        batch = bench_batch(bundle, ds, c=batch_c, reps=reps,
                            warmup=min(warmup, 2))
        reports.extend([batch.sequential, batch.batched])
        logger.info("batched speedup at C=%d: x%.2f", batch_c, batch.speedup)
    logger.info("ground truth vs deformer speedup: x%.2f (observational)",
                comparison.speedup)

    csv_path = cfg.resolve(b["csv"])
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    reports_to_csv(reports, csv_path)
    md_path = cfg.resolve(b["markdown"])
    md_path.write_text(reports_to_markdown(reports), encoding="utf-8")
    out_dir = cfg.resolve(cfg.section("report")["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_timing_bars(reports, out_dir / "timing_bars.png")
    logger.info("wrote %s and %s", csv_path, md_path)
    return 0


_DEMO_CONFIG = {
    "rig": {"kind": "arm", "path": "rig.json"},
    "dataset": {"path": "frames.dataset", "frames": 240, "mode": "clip", "seed": 0},
    "split": {"stride": 10, "offset": 0},
    "model": {"path": "model.daxb", "checkpoint_dir": "checkpoints",
              "epochs": 1200, "seed": 0},
    "bench": {"reps": 1, "warmup": 2, "batch": 16, "frames": 30,
              "csv": "bench.csv", "markdown": "bench.md"},
    "report": {"dir": "report"},
}


def cmd_demo(args) -> int:
    """End to end on a fresh output directory: rig, dataset, training,
    evaluation, benchmark.  Sized to finish in minutes on one CPU."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = json.loads(json.dumps(_DEMO_CONFIG))
    if args.face:
        doc["rig"] = {"kind": "face", "path": "rig.json"}
        doc["model"]["epochs"] = 800
    if args.epochs is not None:
        doc["model"]["epochs"] = args.epochs
    config_path = out / "pipeline.json"
    config_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    logger.info("demo config: %s", config_path)

    ns = argparse.Namespace(config=config_path, append=False, resume=False,
                            ensemble=False, uncertainty=False, batch=None)
    for step in (cmd_extract, cmd_train, cmd_eval, cmd_bench):
        code = step(ns)
        if code != 0:
            return code

    from .dataset import read_dataset, split_indices
    from .deformer import evaluate, load_bundle

    ds = read_dataset(out / "frames.dataset")
    bundle = load_bundle(out / "model.daxb")
    train_idx, val_idx = split_indices(ds.frame_count, 10, 0)
    _, train_sum = evaluate(bundle, ds, train_idx)
    _, val_sum = evaluate(bundle, ds, val_idx)
    summary = {
        "rig": doc["rig"]["kind"],
        "frames": ds.frame_count,
        "vertices": ds.vertex_count,
        "train_rmse": train_sum.rmse,
        "validation_rmse": val_sum.rmse,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("demo complete: train rmse %.6g, validation rmse %.6g",
                train_sum.rmse, val_sum.rmse)
    return 0


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformapprox",
        description="Approximate nonlinear rig deformations on top of a "
                    "linear-blend-skinning baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rig-gen", help="generate a synthetic rig (JSON + OBJ)")
    p.add_argument("kind", choices=["arm", "face"])
    p.add_argument("--out", required=True, help="rig JSON path")
    p.add_argument("--mesh", help="rest mesh OBJ path (default: next to the JSON)")
    p.add_argument("--segments", type=int)
    p.add_argument("--radial", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--bumps", type=int)
    p.set_defaults(func=cmd_rig_gen)

    p = sub.add_parser("extract", help="sample poses and extract a dataset")
    p.add_argument("config")
    p.add_argument("--append", action="store_true",
                   help="append to an existing dataset file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the deformer (or an ensemble)")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoints in model.checkpoint_dir")
    p.add_argument("--ensemble", action="store_true",
                   help="train K members per the ensemble section")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics, heat maps, and figures")
    p.add_argument("config")
    p.add_argument("--uncertainty", action="store_true",
                   help="also export the ensemble uncertainty heat map")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="timing tables (CSV + Markdown)")
    p.add_argument("config")
    p.add_argument("--batch", type=int,
                   help="also run the batched-inference comparison at this C")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("demo", help="end-to-end run in a fresh directory")
    p.add_argument("--out", required=True)
    p.add_argument("--face", action="store_true", help="use the face rig")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except ValueError as exc:
        from .meshcore import NotPositiveDefiniteError

        if isinstance(exc, NotPositiveDefiniteError):
            logger.error("numerical failure: %s", exc)
            return 3
        logger.error("%s", exc)
        return 2
    except ArithmeticError as exc:
        logger.error("numerical failure: %s", exc)
        return 3
    except RuntimeError as exc:
        logger.error("numerical failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
