"""Command line interface: generate / reconstruct / report / render-debug.

Exit codes: 0 success, 1 internal error or failed scene, 2 usage or input
error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bundle
from .errors import FewViewError, InvalidSpec, IoError, MalformedCsv
from .features import analytic_feature_extractor
from .joint import AlternationConfig, reconstruct, reconstruct_no_joint
from .metrics import pixel_error, rotation_error, shape_metrics, translation_error
from .pose_init import NoisyPredictor, OraclePredictor, OutlierPredictor, RansacConfig, init_poses
from .render import render, shade
from .scenes import LIGHT_DIR, NoiseSpec, Scene, SceneSpec, generate_scene, perturb_poses
from .sdf import extract_mesh, load_grid, write_ply

log = logging.getLogger("fewview")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

METRIC_COLUMNS = ("iou", "chamfer_l1", "normal_consistency", "fscore",
                  "pixel_error", "rotation_error", "translation_error")
KEY_COLUMNS = ("scene", "method", "noise", "aligned")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    num_scenes: int = 5
    output_dir: str = "runs/experiment"
    scene: SceneSpec = field(default_factory=SceneSpec)
    scene_dirs: list[str] = field(default_factory=list)   # empty -> <output_dir>/scenes/*
    noise: list[str] = field(default_factory=lambda: ["l3"])
    pose_source: str = "oracle"
    joint: bool = True
    align_similarity: bool = False
    dump_images: bool = False
    jobs: int = 1
    metric_samples: int = 10_000
    metric_points: int = 100_000
    alternation: AlternationConfig = field(default_factory=lambda: AlternationConfig(shape_metrics=False))
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def validate(self) -> "ExperimentConfig":
        for level in self.noise:
            NoiseSpec.from_level(level)
        parse_pose_source(self.pose_source)
        if self.num_scenes < 1 or self.jobs < 1:
            raise InvalidSpec("num_scenes and jobs must be at least 1")
        return self

    def to_json(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return _from_jsonable(cls, obj).validate()


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def _from_jsonable(cls, obj):
    """Inverse of :func:`_to_jsonable`; missing keys take the field defaults."""
    if not isinstance(obj, dict):
        raise InvalidSpec(f"{cls.__name__} expects a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise InvalidSpec(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_jsonable(hint, value)
        elif typing.get_origin(hint) is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"invalid {cls.__name__}: {exc}") from exc


def parse_pose_source(text: str):
    kind, _, arg = text.partition(":")
    if kind in ("oracle", "ransac") and not arg:
        return kind, None
    if kind in ("noisy", "outlier") and arg:
        try:
            return kind, float(arg)
        except ValueError:
            pass
    raise InvalidSpec(f"bad pose source {text!r}; expected oracle, ransac, noisy:SIGMA or outlier:FRACTION")


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def initial_poses(scene: Scene, pose_source: str, noise: NoiseSpec, seed: int, ransac: RansacConfig):
    """Pose-source estimate, then twist noise on top of it."""
    kind, arg = parse_pose_source(pose_source)
    if kind == "oracle":
        base = list(scene.gt_poses)
    else:
        predictor = {
            "ransac": lambda: OraclePredictor(),
            "noisy": lambda: NoisyPredictor(arg, seed),
            "outlier": lambda: OutlierPredictor(arg, seed),
        }[kind]()
        base = [r.pose for r in init_poses(scene, predictor, ransac)]
    return perturb_poses(base, noise, seed)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    probe = path / ".write-test"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise IoError(path, exc.strerror or "not writable") from exc
    return path


def _manifest(out: Path, command: str, cfg: ExperimentConfig, files) -> Path:
    entries = {str(Path(f).relative_to(out)): bundle.sha256(f) for f in sorted(set(map(Path, files)))}
    path = out / f"{command}_manifest.json"
    bundle.write_json({"command": command, "config": cfg.to_json(), "files": entries}, path)
    return path


def cmd_generate(cfg: ExperimentConfig) -> int:
    out = _ensure_dir(Path(cfg.output_dir))
    written = []
    for i in range(cfg.num_scenes):
        scene = generate_scene(cfg.scene, seed=_seed(cfg.seed, i))
        written += bundle.save_scene(scene, out / "scenes" / f"scene_{i:03d}")
        log.info("generated scene_%03d (%s)", i, scene.shape["type"])
    _manifest(out, "generate", cfg, written)
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def _scene_dirs(cfg: ExperimentConfig) -> list[Path]:
    if cfg.scene_dirs:
        dirs = [Path(d) for d in cfg.scene_dirs]
    else:
        root = Path(cfg.output_dir) / "scenes"
        dirs = sorted(p for p in root.glob("*") if p.is_dir()) if root.is_dir() else []
        if not dirs:
            raise IoError(root, "no scene bundles found")
    for d in dirs:
        if not (d / "scene.json").is_file():
            raise IoError(d, "missing scene.json")
    return dirs


def _format(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _dump_images(scene: Scene, grid, poses, directory: Path, cfg: ExperimentConfig) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (view, pose) in enumerate(zip(scene.views, poses)):
        try:
            out = render(grid, pose, scene.K, cfg.alternation.render)
        except FewViewError as exc:
            log.warning("image dump skipped for view %d: %s", i, exc)
            continue
        obs = analytic_feature_extractor(view.intensity, view.mask, view.depth, cfg.alternation.features)
        ren = analytic_feature_extractor(shade(grid, out, LIGHT_DIR), out.mask, out.depth, cfg.alternation.features)
        residual = np.abs(obs.data[0] - ren.data[0])
        names = [directory / f"view_{i:02d}_{k}.png" for k in ("depth", "mask", "residual")]
        bundle.save_depth_png(out.depth, names[0])
        bundle.save_mask_png(out.mask, names[1])
        bundle.save_png16(residual, names[2])
        written += names
    return written


def run_scene(scene_dir: str, scene_index: int, level: str, cfg: ExperimentConfig) -> dict:
    """One (scene, noise level) reconstruction; returns rows and written files."""
    scene = bundle.load_scene(scene_dir)
    name = Path(scene_dir).name
    noise = NoiseSpec.from_level(level)
    seed = _seed(cfg.seed, scene_index, sum(map(ord, level)))
    method = "joint" if cfg.joint else "no_joint"
    out = Path(cfg.output_dir) / "recon" / name / level.replace(":", "_") / method
    out.mkdir(parents=True, exist_ok=True)
    written = []

    init = initial_poses(scene, cfg.pose_source, noise, seed, cfg.ransac)
    if cfg.joint:
        rec = reconstruct(scene, init, cfg.alternation)
        grid, poses = rec.grid, rec.poses
        trace_path = out / "trace.jsonl"
        trace_path.write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in rec.trace.records))
        written.append(trace_path)
    else:
        grid, poses = reconstruct_no_joint(scene, init, cfg.alternation)

    mesh = extract_mesh(grid)
    write_ply(mesh, out / "mesh.ply")
    poses_path = out / "poses.json"
    bundle.write_json({"initial": [p.to_json() for p in init], "final": [p.to_json() for p in poses]}, poses_path)
    written += [out / "mesh.ply", poses_path]
    if cfg.dump_images:
        written += _dump_images(scene, grid, poses, out / "images", cfg)

    samples = scene.gt_mesh.vertices
    pose_cols = {
        "pixel_error": float(np.mean([pixel_error(p, g, scene.K, samples) for p, g in zip(poses, scene.gt_poses)])),
        "rotation_error": float(np.mean([rotation_error(p, g) for p, g in zip(poses, scene.gt_poses)])),
        "translation_error": float(np.mean([translation_error(p, g) for p, g in zip(poses, scene.gt_poses)])),
    }
    rows = []
    for aligned in ([False, True] if cfg.align_similarity else [False]):
        sm = shape_metrics(grid, mesh, scene.gt_mesh, scene.gt_sdf, align=aligned,
                           n_samples=cfg.metric_samples, n_points=cfg.metric_points,
                           bounds=cfg.alternation.fusion.bounds)
        row = {"scene": name, "method": method, "noise": level, "aligned": int(aligned)}
        row.update(dataclasses.asdict(sm))
        row.update(pose_cols)
        rows.append(row)
    return {"rows": rows, "files": [str(p) for p in written]}


def _run_task(args):
    scene_dir, index, level, cfg = args
    try:
        return run_scene(scene_dir, index, level, cfg)
    except FewViewError as exc:
        return {"error": f"{Path(scene_dir).name} noise={level}: {type(exc).__name__}: {exc}"}


def write_metrics_csv(rows, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(KEY_COLUMNS + METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_format(r[c]) for c in KEY_COLUMNS + METRIC_COLUMNS])
    path.write_text(buf.getvalue())


def cmd_reconstruct(cfg: ExperimentConfig) -> int:
    out = _ensure_dir(Path(cfg.output_dir))
    dirs = _scene_dirs(cfg)
    tasks = [(str(d), i, level, cfg) for i, d in enumerate(dirs) for level in cfg.noise]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]

    rows, files, failed = [], [], 0
    for res in results:
        if "error" in res:
            failed += 1
            log.error("scene failed: %s", res["error"])
            continue
        rows += res["rows"]
        files += res["files"]
    method = "joint" if cfg.joint else "no_joint"
    csv_path = out / f"metrics_{method}.csv"
    json_path = out / f"metrics_{method}.json"
    write_metrics_csv(rows, csv_path)
    bundle.write_json(rows, json_path)
    _manifest(out, f"reconstruct_{method}", cfg, files + [csv_path, json_path])
    log.info("%d rows written to %s (%d failures)", len(rows), csv_path, failed)
    return EXIT_INTERNAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def read_metrics_csv(path) -> list[dict]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    lines = list(csv.reader(io.StringIO(text)))
    if not lines or not any(lines[0]):
        raise MalformedCsv(f"{path}: empty file", line=1)
    header = lines[0]
    missing = [c for c in ("method", "noise") if c not in header]
    metric_cols = [c for c in header if c not in KEY_COLUMNS]
    if missing or not metric_cols:
        raise MalformedCsv(f"{path}: header needs method, noise and at least one metric column", line=1)
    rows = []
    for lineno, values in enumerate(lines[1:], start=2):
        if not values:
            continue
        if len(values) != len(header):
            raise MalformedCsv(f"{path}: expected {len(header)} fields, got {len(values)}", line=lineno)
        row = dict(zip(header, values))
        for c in metric_cols:
            try:
                row[c] = float(row[c])
            except ValueError:
                raise MalformedCsv(f"{path}: column {c!r} is not a number: {row[c]!r}", line=lineno) from None
        rows.append(row)
    if not rows:
        raise MalformedCsv(f"{path}: no data rows", line=2)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and median of every metric per (method, noise[, aligned])."""
    metric_cols = [c for c in rows[0] if c not in KEY_COLUMNS]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["method"], r["noise"], r.get("aligned", "0"))
        groups.setdefault(key, []).append(r)
    table = []
    for (method, noise, aligned), members in sorted(groups.items()):
        entry = {"method": method, "noise": noise, "aligned": aligned, "n": len(members)}
        for c in metric_cols:
            vals = np.array([m[c] for m in members], dtype=float)
            entry[f"{c}_mean"] = float(np.mean(vals))
            entry[f"{c}_median"] = float(np.median(vals))
        table.append(entry)
    return table


def cmd_report(paths, output: str | None) -> int:
    rows = []
    for p in paths:
        rows += read_metrics_csv(p)
    table = aggregate(rows)
    cols = list(table[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for entry in table:
        writer.writerow([_format(entry[c]) for c in cols])
    if output:
        Path(output).write_text(buf.getvalue())
    metric_names = [c[:-5] for c in cols if c.endswith("_mean")]
    print("cells are mean/median")
    print(f"{'method':<10} {'noise':<12} {'aligned':>7} {'n':>4} " + " ".join(f"{m:>22}" for m in metric_names))
    for e in table:
        cells = " ".join(f"{e[m + '_mean']:.4g}/{e[m + '_median']:.4g}".rjust(22) for m in metric_names)
        print(f"{e['method']:<10} {e['noise']:<12} {e['aligned']:>7} {e['n']:>4} {cells}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render-debug
# ---------------------------------------------------------------------------

def cmd_render_debug(scene_dir: str, view: int, grid_path: str | None, out_dir: str, noise: str, seed: int) -> int:
    scene = bundle.load_scene(scene_dir)
    if not 0 <= view < len(scene.views):
        raise InvalidSpec(f"view {view} out of range (scene has {len(scene.views)})")
    grid = load_grid(grid_path) if grid_path else scene.gt_grid
    pose = perturb_poses([scene.gt_poses[view]], NoiseSpec.from_level(noise), seed)[0]
    out = render(grid, pose, scene.K)
    d = _ensure_dir(Path(out_dir))
    bundle.save_depth_png(out.depth, d / f"view_{view:02d}_depth.png")
    bundle.save_mask_png(out.mask, d / f"view_{view:02d}_mask.png")
    bundle.save_png16(shade(grid, out, LIGHT_DIR), d / f"view_{view:02d}_intensity.png")
    observed = scene.views[view].mask
    print(f"hits={int(out.mask.sum())} observed={int(observed.sum())} "
          f"mask_xor={int((out.mask ^ observed).sum())}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="experiment JSON; omitted keys take defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--noise", action="append", metavar="{gt,l1,l2,l3,custom:SIGMA}",
                   help="noise level; repeat for several")
    p.add_argument("--pose-source", metavar="{oracle,noisy:SIGMA,outlier:FRAC,ransac}")
    p.add_argument("--no-joint", action="store_true", help="single shape update at the initial poses")
    p.add_argument("--dump-images", action="store_true")
    p.add_argument("--align-similarity", action="store_true", help="also report similarity-aligned shape metrics")
    p.add_argument("--output", "-o", metavar="DIR", help="output directory")
    p.add_argument("--num-scenes", type=int)
    p.add_argument("--scene-dir", action="append", metavar="DIR", help="scene bundle to reconstruct; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewview", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    _experiment_args(sub.add_parser("generate", help="write synthetic scene bundles"))
    _experiment_args(sub.add_parser("reconstruct", help="pose init + joint refinement + metrics"))
    rep = sub.add_parser("report", help="aggregate metrics CSVs")
    rep.add_argument("csv", nargs="+")
    rep.add_argument("--output", "-o", metavar="CSV")
    dbg = sub.add_parser("render-debug", help="render one view of a scene bundle")
    dbg.add_argument("scene_dir")
    dbg.add_argument("--view", type=int, default=0)
    dbg.add_argument("--grid", metavar="SDFG", help="grid to render instead of the ground truth")
    dbg.add_argument("--noise", default="gt")
    dbg.add_argument("--seed", type=int, default=0)
    dbg.add_argument("--output", "-o", default="render-debug", metavar="DIR")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    obj = {}
    if args.config:
        try:
            obj = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise IoError(args.config, exc.strerror or str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{args.config}: invalid JSON: {exc}") from exc
    cfg = ExperimentConfig.from_json(obj)
    overrides = {
        "seed": args.seed, "jobs": args.jobs, "noise": args.noise, "pose_source": args.pose_source,
        "output_dir": args.output, "num_scenes": args.num_scenes, "scene_dirs": args.scene_dir,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.no_joint:
        cfg.joint = False
    if args.dump_images:
        cfg.dump_images = True
    if args.align_similarity:
        cfg.align_similarity = True
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.csv, args.output)
        if args.command == "render-debug":
            return cmd_render_debug(args.scene_dir, args.view, args.grid, args.output, args.noise, args.seed)
        cfg = load_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        return cmd_reconstruct(cfg)
    except (IoError, MalformedCsv, InvalidSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
