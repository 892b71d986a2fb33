"""
``harvest`` command line.

Subcommands chain the pipeline stages through files::

    harvest segment scene.pcd --out mask.pcd
    harvest cluster mask.pcd --out clusters.csv
    harvest fit clusters.csv --out model.json
    harvest grasp clusters.csv --out poses.csv
    harvest plan poses.csv --out plan.json
    harvest simulate easy_scene.json --seed 7 --out records.csv
    harvest report trial1.csv

Exit status is 0 on success, 1 on a domain error (one line on stderr) and
2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .cloud import ColorPointCloud, estimate_normals, load_cloud_with_fields, save_cloud
from .config import PipelineConfig, load_config
from .errors import EmptyInput, HarvestError, IoFailure, MalformedHeader
from .perception import GaussianColorModel, euclidean_cluster, segment
from .planning.trajectories import attach_trajectory, separation_move, trajectories_to_json
from .pose_estimation.poses import read_poses_csv, write_poses_csv
from .pose_estimation.ranking import Mode, score_candidates
from .pose_estimation.superellipsoid import fit_superellipsoid, grasp_from_model
from .sim.scene import SceneSpec
from .sim.trial import aggregate, fixture_text, parse_records, run_trials, write_records

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
FIXTURES = ("trial1.csv", "trial2.csv")
CLUSTER_COLUMNS = ["point", "cluster", "x", "y", "z", "r", "g", "b"]


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


# ------------------------------------------------------------------ stages

def cmd_segment(args, cfg):
    cloud, _ = load_cloud_with_fields(args.cloud)
    model = GaussianColorModel.load(args.model) if args.model else cfg.segmentation.model()
    mask = segment(cloud, model, cfg.segmentation.params())
    if args.out is None:
        raise EmptyInput("segment writes a PCD file; pass --out")
    save_cloud(cloud, args.out, format="pcd", extra_fields={"mask": mask.astype(int)})


def cmd_cluster(args, cfg):
    cloud, extras = load_cloud_with_fields(args.mask)
    if "mask" not in extras:
        raise MalformedHeader(f"{args.mask}: no 'mask' field; run 'segment' first")
    tol = args.tolerance if args.tolerance is not None else cfg.clustering.tolerance
    clusters = euclidean_cluster(cloud, extras["mask"] > 0.5, tol, cfg.clustering.min_size)
    label = np.full(len(cloud), -1)
    for k, c in enumerate(clusters):
        label[c.ids] = k
    buf = io.StringIO()
    vp = cloud.viewpoint
    buf.write(f"# viewpoint {vp[0]:.6f} {vp[1]:.6f} {vp[2]:.6f}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLUSTER_COLUMNS)
    rgb = np.round(cloud.colors * 255).astype(int)
    for i in np.flatnonzero(label >= 0):
        p = cloud.positions[i]
        w.writerow([i, label[i], f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", *rgb[i]])
    _emit(buf.getvalue(), args.out)


def _load_cluster(path, which: int) -> ColorPointCloud:
    lines = _read_text(path).splitlines()
    vp = np.zeros(3)
    body = []
    for line in lines:
        if line.startswith("# viewpoint"):
            vp = np.array([float(v) for v in line.split()[2:5]])
        elif not line.startswith("#"):
            body.append(line)
    rows = list(csv.DictReader(body))
    try:
        rows = [r for r in rows if int(r["cluster"]) == which]
        pos = np.array([[float(r[k]) for k in "xyz"] for r in rows]).reshape(-1, 3)
        col = np.array([[int(r[k]) for k in "rgb"] for r in rows]).reshape(-1, 3) / 255.0
    except (KeyError, ValueError) as exc:
        raise MalformedHeader(f"{path}: bad cluster CSV ({exc})") from exc
    if len(pos) == 0:
        raise EmptyInput(f"{path}: cluster {which} is empty")
    return ColorPointCloud(pos, col, viewpoint=vp)


def cmd_fit(args, cfg):
    cloud = _load_cluster(args.clusters, args.cluster)
    model = fit_superellipsoid(cloud.positions)
    _emit(json.dumps(model.to_json(), indent=1) + "\n", args.out)


def cmd_grasp(args, cfg):
    cloud = _load_cluster(args.clusters, args.cluster)
    rk = cfg.ranking
    if rk.method == "MODEL":
        poses = [grasp_from_model(fit_superellipsoid(cloud.positions))]
    else:
        cloud = estimate_normals(cloud, rk.patch_radius)
        poses = score_candidates(cloud, np.arange(len(cloud)), cfg.grasp_weights(), Mode.GRASP,
                                 boundary_radius=rk.boundary_radius)
    if args.top is not None:
        poses = poses[: args.top]
    _emit(write_poses_csv(poses), args.out)


def cmd_plan(args, cfg):
    try:
        poses = read_poses_csv(args.poses)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except (KeyError, ValueError) as exc:
        raise MalformedHeader(f"{args.poses}: bad pose CSV ({exc})") from exc
    if not poses:
        raise EmptyInput(f"{args.poses}: no poses")
    best = poses[0]
    m = cfg.motion
    attach = attach_trajectory(best, m.standoff, m.speed)
    lift = separation_move(best.position, best.orientation, m.rise, m.speed)
    _emit(trajectories_to_json([attach, lift]) + "\n", args.out)


def cmd_simulate(args, cfg):
    scenes = []
    for path in args.scenes:
        try:
            data = json.loads(_read_text(path))
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"{path}: not valid JSON ({exc})") from exc
        scenes.append(SceneSpec.from_json(data))
    runs = run_trials(scenes, cfg, jobs=args.jobs)
    _emit(write_records([r for recs in runs for r in recs]), args.out)


def cmd_report(args, cfg):
    path = Path(args.records)
    if not path.exists() and args.records in FIXTURES:
        text = fixture_text(args.records)
    else:
        text = _read_text(path)
    stats = aggregate(parse_records(text))
    _emit(json.dumps(stats.to_json(), indent=1, sort_keys=True) + "\n", args.out)


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so tests can call :func:`run_command` in-process."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config overlaid on the defaults")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (simulate)")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="harvest", description="Sweet-pepper harvesting pipeline tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("segment", parents=[common], help="colour-segment a cloud into a mask PCD")
    s.add_argument("cloud")
    s.add_argument("--model", help="colour model JSON (default: config)")
    s = sub.add_parser("cluster", parents=[common], help="Euclidean clusters of a mask PCD")
    s.add_argument("mask")
    s.add_argument("--tolerance", type=float)
    for name, text in (("fit", "fit a superellipsoid to one cluster"), ("grasp", "rank grasp poses on one cluster")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("clusters")
        s.add_argument("--cluster", type=int, default=0, help="cluster index (0 = largest)")
        if name == "grasp":
            s.add_argument("--top", type=int, help="keep only the best N poses")
    s = sub.add_parser("plan", parents=[common], help="attach and lift trajectories for the best pose")
    s.add_argument("poses")
    s = sub.add_parser("simulate", parents=[common], help="run simulated trials on scene JSON files")
    s.add_argument("scenes", nargs="+")
    s = sub.add_parser("report", parents=[common], help="trial statistics from a records CSV")
    s.add_argument("records")
    return p


COMMANDS = {
    "segment": cmd_segment, "cluster": cmd_cluster, "fit": cmd_fit, "grasp": cmd_grasp,
    "plan": cmd_plan, "simulate": cmd_simulate, "report": cmd_report,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            COMMANDS[args.command](args, cfg)
    except HarvestError as exc:
        sys.stderr.write(f"harvest: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}\n")
        return EXIT_DOMAIN
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"harvest: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}\n")
        return EXIT_DOMAIN
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
