"""Command-line entry point: ``pcrp {train,index,query,register,eval,sample}``.

Exit status is 0 on success, 1 when the operation fails, and 2 for usage
errors and missing inputs. Diagnostics go to stderr; results go to stdout or
to the files named by ``--output``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io as pcio
from .config import ConfigError, PipelineConfig, load_config
from .evaluation import error_cdf, error_stats
from .frpointhop import extract_features, fit_model, load_model, save_model
from .geometry import RigidTransform, chamfer_distance, random_rigid_transform
from .registration import (
    PoseEstimate,
    POSE_FIELDS,
    attach_chamfer,
    format_pose_record,
    icp_baseline,
    register_features,
    rotation_error_deg,
)
from .retrieval import (
    build_gallery,
    compute_vlad,
    fit_codebook,
    ground_truth_ranking,
    load_codebook,
    load_gallery,
    precision_at_m,
    retrieve,
    save_codebook,
    save_gallery,
)

log = logging.getLogger("pcrp")

CLOUD_SUFFIXES = (".xyz", ".txt", ".off")
MODEL_FILE = "model.pcrp"
CODEBOOK_FILE = "codebook.pcrc"
ICP_MIN_INLIER_FRACTION = 0.5

METRIC_COLUMNS = (
    ["query_id", "category", "retrieved_id", "retrieved_category", "vlad_distance",
     "precision_at_m", "top1_chamfer", "rotation_error_deg", "translation_error",
     "tx_error", "ty_error", "tz_error", "inliers", "rms_residual", "pose_chamfer", "reliable"]
    + [f"gt_r{i}{j}" for i in range(3) for j in range(3)] + ["gt_tx", "gt_ty", "gt_tz"]
)


class UsageError(Exception):
    """Bad invocation or missing input; exit status 2."""


# -- dataset discovery ------------------------------------------------------------

def collect_clouds(directory, split: str | None = None, categories=None):
    """``[(object_id, category, path)]`` sorted by id.

    With the ModelNet layout ``<dir>/<category>/<split>/*`` only the requested
    split (and categories, when given) is used. Otherwise every cloud file under
    ``directory`` is taken, with the first path component as its category.
    """
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"dataset directory not found: {root}")
    found = []
    layout = split is not None and any((d / split).is_dir() for d in root.iterdir() if d.is_dir())
    if layout:
        for cat_dir in sorted(d for d in root.iterdir() if d.is_dir()):
            if categories and cat_dir.name not in categories:
                continue
            split_dir = cat_dir / split
            if not split_dir.is_dir():
                continue
            for p in sorted(split_dir.rglob("*")):
                if p.is_file() and p.suffix.lower() in CLOUD_SUFFIXES:
                    rel = p.relative_to(root).with_suffix("")
                    found.append((rel.as_posix(), cat_dir.name, p))
    else:
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.suffix.lower() in CLOUD_SUFFIXES:
                rel = p.relative_to(root)
                cat = rel.parts[0] if len(rel.parts) > 1 else "unknown"
                found.append((rel.with_suffix("").as_posix(), cat, p))
    found.sort(key=lambda it: it[0])
    return found


def _load(path, cfg: PipelineConfig):
    return pcio.load_cloud(path, n_points=cfg.n_points)


def _pmap(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _dataset_dir(args, cfg: PipelineConfig, attr: str) -> Path:
    value = getattr(args, attr, None) or cfg.dataset_root
    if not value:
        raise UsageError(f"no dataset path given (--{attr} or dataset_root in the config)")
    return Path(value)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- commands -------------------------------------------------------------------------

def cmd_train(args, cfg: PipelineConfig) -> int:
    items = collect_clouds(_dataset_dir(args, cfg, "dataset"), cfg.gallery_split, cfg.categories)
    if not items:
        raise UsageError("no training clouds found")
    clouds = _pmap(lambda it: _load(it[2], cfg), items, cfg.threads)
    model = fit_model(clouds, cfg.hop_config(), rng_seed=cfg.seed)
    feats = _pmap(lambda c: extract_features(model, c).features, clouds, cfg.threads)

    rng = np.random.default_rng(cfg.seed)
    per_cloud = max(1, math.ceil(cfg.codebook_samples / len(feats)))
    pooled = []
    for f in feats:
        if f.shape[0] > per_cloud:
            f = f[np.sort(rng.choice(f.shape[0], per_cloud, replace=False))]
        pooled.append(f)
    codebook = fit_codebook(np.vstack(pooled), k=cfg.vlad_k, seed=cfg.seed)

    out = Path(args.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / MODEL_FILE)
    save_codebook(codebook, out / CODEBOOK_FILE)
    print(f"training_clouds\t{len(clouds)}")
    print(f"hop1_dim\t{model.hop1.n_out}")
    print(f"hop1_retained_energy\t{model.hop1.retained_energy:.6f}")
    print(f"hop2_dim\t{model.hop2.n_out}")
    print(f"hop2_retained_energy\t{model.hop2.retained_energy:.6f}")
    print(f"feature_dim\t{model.feature_dim}")
    print(f"codewords\t{codebook.k}")
    print(f"kmeans_iterations\t{codebook.n_iter}")
    print(f"kmeans_inertia\t{codebook.inertia:.6g}")
    print(f"model\t{out / MODEL_FILE}")
    print(f"codebook\t{out / CODEBOOK_FILE}")
    return 0


def cmd_index(args, cfg: PipelineConfig) -> int:
    model = load_model(_require_file(args.model, "model"))
    codebook = load_codebook(_require_file(args.codebook, "codebook"))
    items = collect_clouds(_dataset_dir(args, cfg, "gallery"), cfg.gallery_split, cfg.categories)
    if not items:
        raise UsageError("gallery directory holds no clouds")
    gallery = [(oid, cat, _load(p, cfg), str(p)) for oid, cat, p in items]
    index = build_gallery(model, codebook, gallery, threads=cfg.threads)
    out = Path(args.output or "gallery.pcrg")
    save_gallery(index, out)
    print(f"records\t{len(index)}")
    print(f"index\t{out}")
    return 0


def _read_query(path, normalize: bool):
    p = _require_file(path, "query file")
    try:
        return pcio.load_cloud(p, normalize=normalize)
    except ValueError as exc:
        raise ValueError(f"malformed query file: {exc}") from None


def cmd_query(args, cfg: PipelineConfig) -> int:
    index = load_gallery(_require_file(args.index, "gallery index"))
    model = load_model(_require_file(args.model, "model"))
    query = _read_query(args.query, args.normalize)
    qfeat = extract_features(model, query)
    m = min(args.m or cfg.retrieval_m, len(index))
    ranked = retrieve(index, compute_vlad(index.codebook, qfeat), m)
    lines = ["# rank\tobject_id\tvlad_distance"]
    lines += [f"{r}\t{oid}\t{d:.10g}" for r, (oid, d) in enumerate(ranked, 1)]
    if not args.no_pose:
        rec = index.record(ranked[0][0])
        target = _load(rec.cloud_path, cfg)
        rcfg = cfg.registration_config()
        est = register_features(qfeat, extract_features(model, target), rcfg)
        est = attach_chamfer(est, query, target, rcfg, retrieved_id=rec.object_id)
        lines.append("# " + " ".join(POSE_FIELDS))
        lines.append(format_pose_record(Path(args.query).stem, est))
        if not est.reliable:
            log.warning("pose flagged unreliable (chamfer %.4f, threshold %.4f)",
                        est.chamfer, cfg.chamfer_threshold)
    _emit(lines, args.output)
    return 0


def _emit(lines, output):
    text = "\n".join(lines) + "\n"
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_register(args, cfg: PipelineConfig) -> int:
    src = _read_query(args.source, args.normalize)
    dst = _read_query(args.target, args.normalize)
    rcfg = cfg.registration_config()
    if args.icp:
        transform = icp_baseline(src, dst)
        res, _ = cKDTree(dst).query(transform.apply(src), k=1)
        inl = res < rcfg.inlier_threshold
        rms = float(np.sqrt(np.mean(res[inl] ** 2))) if inl.any() else math.inf
        # a stuck ICP can still score a low chamfer; a low inlier fraction gives it away
        est = PoseEstimate(transform, int(inl.sum()), src.shape[0], rms,
                           reliable=bool(inl.mean() >= ICP_MIN_INLIER_FRACTION))
        est = attach_chamfer(est, src, dst, rcfg)
    else:
        if args.model is None:
            raise UsageError("--model is required unless --icp is given")
        model = load_model(_require_file(args.model, "model"))
        est = register_features(extract_features(model, src), extract_features(model, dst), rcfg)
        est = attach_chamfer(est, src, dst, rcfg)
    est = replace(est, retrieved_id=Path(args.target).stem)
    _emit(["# " + " ".join(POSE_FIELDS), format_pose_record(Path(args.source).stem, est)], args.output)
    if not est.reliable:
        hint = " (ICP only converges from small misalignments)" if args.icp else ""
        log.warning("registration looks unreliable: chamfer %.4f (threshold %.4f), %d of %d inliers%s",
                    est.chamfer, cfg.chamfer_threshold, est.inlier_count, est.n_correspondences, hint)
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    index = load_gallery(_require_file(args.index, "gallery index"))
    model = load_model(_require_file(args.model, "model"))
    tests = collect_clouds(_dataset_dir(args, cfg, "test"), cfg.test_split, cfg.categories)
    if not tests:
        raise UsageError("no test clouds found")
    gallery_clouds = {r.object_id: _load(r.cloud_path, cfg) for r in index.records}
    gallery_cats = {r.object_id: r.category for r in index.records}
    m = min(args.m or cfg.retrieval_m, len(index))
    rcfg = cfg.registration_config()

    def run(i_item):
        i, (oid, cat, path) = i_item
        canonical = _load(path, cfg)
        if args.mode == "arbitrary":
            applied = random_rigid_transform([cfg.seed, i], cfg.max_rotation_deg, cfg.max_translation)
        else:
            applied = RigidTransform.identity()
        query = applied.apply(canonical)
        qfeat = extract_features(model, query)
        ranked = retrieve(index, compute_vlad(index.codebook, qfeat), m)
        truth = ground_truth_ranking(canonical, gallery_clouds)
        best_id, best_d = ranked[0]
        target = gallery_clouds[best_id]
        est = register_features(qfeat, extract_features(model, target), rcfg)
        est = attach_chamfer(est, query, target, rcfg, retrieved_id=best_id)
        # the gallery is canonical, so the ideal pose undoes the applied transform
        ideal = applied.inverse()
        t_err = est.transform.translation - ideal.translation
        row = {
            "query_id": oid, "category": cat, "retrieved_id": best_id,
            "retrieved_category": gallery_cats[best_id], "vlad_distance": best_d,
            "precision_at_m": precision_at_m([r[0] for r in ranked], truth, m),
            "top1_chamfer": chamfer_distance(canonical, target),
            "rotation_error_deg": rotation_error_deg(est.transform, ideal),
            "translation_error": float(np.linalg.norm(t_err)),
            "tx_error": t_err[0], "ty_error": t_err[1], "tz_error": t_err[2],
            "inliers": est.inlier_count, "rms_residual": est.rms_residual,
            "pose_chamfer": est.chamfer, "reliable": int(est.reliable),
        }
        for a in range(3):
            for b in range(3):
                row[f"gt_r{a}{b}"] = applied.rotation[a, b]
        row["gt_tx"], row["gt_ty"], row["gt_tz"] = applied.translation
        return row

    rows = _pmap(run, list(enumerate(tests)), cfg.threads)
    out = Path(args.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})

    rot = [r["rotation_error_deg"] for r in rows]
    trans = [[r["tx_error"], r["ty_error"], r["tz_error"]] for r in rows]
    rs, ts = error_stats(rot), error_stats(trans)
    summary = [
        ("queries", len(rows)),
        ("mode", args.mode),
        ("m", m),
        ("precision_at_m", float(np.mean([r["precision_at_m"] for r in rows]))),
        ("mean_top1_chamfer", float(np.mean([r["top1_chamfer"] for r in rows]))),
        ("rotation_mean_deg", rs["mean"]),
        ("rotation_median_deg", rs["median"]),
        ("rotation_mse", rs["mse"]),
        ("rotation_rmse", rs["rmse"]),
        ("rotation_mae", rs["mae"]),
        ("translation_mse", ts["mse"]),
        ("translation_rmse", ts["rmse"]),
        ("translation_mae", ts["mae"]),
        ("fraction_rotation_below_5deg", float(np.mean(np.asarray(rot) < 5.0))),
        ("fraction_reliable", float(np.mean([r["reliable"] for r in rows]))),
    ]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(summary)
    th, frac = error_cdf(rot)
    with open(out / "rotation_cdf.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_deg", "fraction"])
        w.writerows(zip(th.tolist(), frac.tolist()))
    for k, v in summary:
        print(f"{k}\t{v}")
    return 0


def cmd_sample(args, cfg: PipelineConfig) -> int:
    src = Path(args.input)
    n = args.n or cfg.n_points
    seed = cfg.seed
    if src.is_file():
        verts, faces = pcio.read_off(src)
        pts = pcio.sample_mesh_surface(verts, faces, n, seed=seed)
        out = Path(args.output) if args.output else src.with_suffix(".xyz")
        out.parent.mkdir(parents=True, exist_ok=True)
        pcio.write_xyz(out, pts)
        print(f"{src}\t{out}")
        return 0
    if not src.is_dir():
        raise UsageError(f"input not found: {src}")
    meshes = sorted(p for p in src.rglob("*") if p.is_file() and p.suffix.lower() == ".off")
    if not meshes:
        raise UsageError(f"no .off meshes under {src}")
    dest = Path(args.output or src)
    for mesh in meshes:
        rel = mesh.relative_to(src)
        verts, faces = pcio.read_off(mesh)
        pts = pcio.sample_mesh_surface(verts, faces, n,
                                       seed=[seed, zlib.crc32(rel.as_posix().encode("utf-8"))])
        out = dest / rel.with_suffix(".xyz")
        out.parent.mkdir(parents=True, exist_ok=True)
        pcio.write_xyz(out, pts)
        print(f"{mesh}\t{out}")
    return 0


# -- parser ------------------------------------------------------------------------------

def _override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value config file")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--threads", type=int, help="worker threads for per-cloud work")
    shared.add_argument("--output", help="output file or directory")
    shared.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                        metavar="KEY=VALUE", help="override any config key")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pcrp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="fit the feature model and VLAD codebook")
    p.add_argument("--dataset", help="dataset root (<category>/<split>/*.xyz|off)")
    p.add_argument("--k", type=int, help="number of VLAD codewords")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", parents=[shared], help="precompute gallery VLAD vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--gallery", help="gallery directory (default: dataset_root)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[shared], help="retrieve and register one query cloud")
    p.add_argument("query")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--m", type=int, help="number of retrieved objects to list")
    p.add_argument("--no-pose", action="store_true", help="retrieval only")
    p.add_argument("--normalize", action="store_true", help="unit-sphere normalize the query first")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("register", parents=[shared], help="register a source cloud onto a target")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--model")
    p.add_argument("--icp", action="store_true", help="use the point-to-point ICP baseline")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", parents=[shared], help="retrieval and pose metrics over a test set")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test", help="test directory (default: dataset_root)")
    p.add_argument("--mode", choices=("aligned", "arbitrary"), default="arbitrary")
    p.add_argument("--m", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", parents=[shared], help="sample OFF meshes into XYZ clouds")
    p.add_argument("input", help="OFF file or directory")
    p.add_argument("--n", type=int, help="points per cloud (default 2048)")
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if getattr(args, "k", None) is not None:
        overrides["vlad_k"] = args.k
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"pcrp: error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"pcrp: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"pcrp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
