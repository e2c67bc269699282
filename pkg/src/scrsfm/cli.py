"""Command-line front end: ``synth``, ``reconstruct``, ``eval`` and ``selfcheck``.

Options may also come from a ``key=value`` config file (``--config``); flags
given on the command line override the file, which overrides built-in
defaults.  Keys are the long option names with dashes or underscores.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .errors import AllSeedsFailed, InvalidConfig, ScrSfmError, ViewMismatch
from .evaluation import accuracy_report
from .mapping import MappingConfig
from .pipeline import PipelineConfig, read_poses, reconstruct, save_state, write_result_poses
from .pnp import RansacConfig
from .regressor import LossConfig
from .synth import KINDS, FeatureFieldConfig, SceneConfig, generate_scene, load_inputs, load_scene, save_scene, \
    write_manifest

EXIT_OK, EXIT_CHECK, EXIT_RECON, EXIT_USAGE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_reconstruct_options(p):
    g = p.add_argument_group("registration")
    g.add_argument("--registration-threshold", type=int, default=500,
                   help="inliers needed to register a view (published value: 500)")
    g.add_argument("--final-threshold", type=int, default=1000,
                   help="inliers needed in the final relocalization (published value: 1000)")
    g.add_argument("--termination-fraction", type=float, default=0.01,
                   help="stop when fewer than this fraction of views is newly registered (published value: 1%%)")
    g.add_argument("--seed-candidates", type=int, default=5, help="seed images tried (published value: 5)")
    g.add_argument("--seed-probe-limit", type=int, default=1000,
                   help="views relocalized to score a seed (published value: 1000)")
    g.add_argument("--hypotheses", type=int, default=32, help="RANSAC hypotheses per view (published value: 32)")
    g.add_argument("--final-hypotheses", type=int, default=64,
                   help="RANSAC hypotheses in the final pass (published value: 64)")
    g.add_argument("--max-retries", type=int, default=16,
                   help="resampling attempts per hypothesis (published value: 16)")
    g.add_argument("--inlier-threshold", type=float, default=10.0,
                   help="reprojection inlier threshold in px (published value: 10)")
    g.add_argument("--focal-init", type=float, default=None,
                   help="initial focal length in px (default: 70%% of the image diagonal, published heuristic)")

    g = p.add_argument_group("mapping")
    d = MappingConfig()
    g.add_argument("--batch-size", type=int, default=d.batch_size, help="samples per batch (published value: 5120)")
    g.add_argument("--lr-low", type=float, default=None,
                   help=f"start/end learning rate (desk default {d.lr_low:g}; published value: 5e-4)")
    g.add_argument("--lr-high", type=float, default=None,
                   help=f"peak learning rate (desk default {d.lr_high:g}; published value: 3e-3)")
    g.add_argument("--warmup-iters", type=int, default=d.warmup_iters,
                   help="warm-up iterations (desk scale; published value: 1000)")
    g.add_argument("--cooldown-iters", type=int, default=d.cooldown_iters,
                   help="cool-down iterations (desk scale; published value: 5000)")
    g.add_argument("--max-iters", type=int, default=d.max_iters,
                   help="iteration cap per mapping round (desk scale; published value: 25000)")
    g.add_argument("--standby-iters", type=int, default=d.refiner_standby_iters,
                   help="refiner standby in the final refit (desk scale; published value: 5000)")
    g.add_argument("--buffer-cap", type=int, default=d.buffer_cap,
                   help="training buffer size (desk scale; published value: 8M)")
    g.add_argument("--max-passes", type=int, default=d.max_passes,
                   help="sampling passes over the views (published value: 10)")
    g.add_argument("--samples-per-view", type=int, default=d.samples_per_view_per_pass,
                   help="samples per view per pass (published value: 1024)")
    g.add_argument("--soft-clamp", type=float, default=50.0, help="loss soft clamp in px (published value: 50)")
    g.add_argument("--early-stop-window", type=int, default=d.early_stop_window,
                   help="consecutive batches for early stopping (published value: 100)")
    g.add_argument("--early-stop-fraction", type=float, default=d.early_stop_fraction,
                   help="fraction of errors under the threshold (published value: 0.7)")
    g.add_argument("--no-early-stopping", action="store_true", help="always run to the iteration cap")
    g.add_argument("--no-refiner", action="store_true", help="disable the pose refiner")
    g.add_argument("--no-focal", action="store_true", help="keep the focal length fixed")
    g.add_argument("--published-scale", action="store_true",
                   help="use the published iteration counts, buffer size and learning rates")


def build_parser():
    p = _Parser(prog="scrsfm", description="Incremental scene-coordinate reconstruction on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene file and manifest")
    s.add_argument("--kind", choices=KINDS, default="room_orbit")
    s.add_argument("--views", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-sigma", type=float, default=FeatureFieldConfig().noise_sigma)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--height", type=int, default=480)
    s.add_argument("--focal", type=float, default=None, help="ground-truth focal (default 70%% of the diagonal)")
    s.add_argument("-o", "--output", required=True)

    r = sub.add_parser("reconstruct", help="reconstruct poses from a scene file (ground truth is never read)")
    r.add_argument("scene")
    r.add_argument("-o", "--output", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=0, help="root random seed")
    r.add_argument("--workers", type=int, default=None, help="relocalization threads (env ACE0_WORKERS)")
    r.add_argument("--config", default=None, help="key=value config file")
    _add_reconstruct_options(r)

    e = sub.add_parser("eval", help="score a pose file against the scene's ground truth")
    e.add_argument("scene")
    e.add_argument("poses")
    e.add_argument("-o", "--output", default=None, help="output prefix (writes PREFIX.txt and PREFIX.csv)")
    e.add_argument("--delta-t", type=float, default=0.01, help="translation threshold as a fraction of diameter")
    e.add_argument("--delta-r", type=float, default=5.0, help="rotation threshold in degrees")
    e.add_argument("--inlier-tol", type=float, default=0.05,
                   help="alignment inlier tolerance as a fraction of diameter")
    e.add_argument("--pass-bar", type=float, default=0.01,
                   help="exit 0 iff median translation error < PASS_BAR * diameter")
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("selfcheck", help="fast invariant suite (gradients, PnP, alignment)")
    c.add_argument("--inject-fault", action="append", default=[],
                   choices=["reprojection", "euclidean", "regressor", "refiner", "focal", "kabsch"],
                   help="deliberately break one analytic path (testing aid)")
    return p


def read_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected key=value")
            k, v = (x.strip() for x in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _apply_config_file(parser, sub_name, argv, values):
    """Re-parse with file values installed as defaults so explicit flags still win."""
    sub = parser._subparsers._group_actions[0].choices[sub_name]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in values.items():
        if k not in actions or k in ("config", "scene", "output"):
            raise InvalidConfig(f"unknown config key {k!r}")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            defaults[k] = a.type(v) if a.type else v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def configs_from_args(a):
    mkw = dict(
        batch_size=a.batch_size, max_passes=a.max_passes,
        samples_per_view_per_pass=a.samples_per_view, early_stop_window=a.early_stop_window,
        early_stop_fraction=a.early_stop_fraction, early_stop_threshold=a.inlier_threshold,
        early_stopping=not a.no_early_stopping, loss=LossConfig(soft_clamp_tau=a.soft_clamp),
    )
    mkw.update({k: getattr(a, k) for k in ("lr_low", "lr_high") if getattr(a, k) is not None})
    if a.published_scale:
        mcfg = MappingConfig.published_scale(**mkw)
    else:
        mcfg = MappingConfig(warmup_iters=a.warmup_iters, cooldown_iters=a.cooldown_iters, max_iters=a.max_iters,
                             refiner_standby_iters=a.standby_iters, buffer_cap=a.buffer_cap, **mkw)
    pcfg = PipelineConfig(
        registration_threshold=a.registration_threshold, final_threshold=a.final_threshold,
        termination_fraction=a.termination_fraction, seed_candidates=a.seed_candidates,
        seed_probe_limit=a.seed_probe_limit, rng_seed=a.seed,
        ransac=RansacConfig(hypotheses=a.hypotheses, max_retries=a.max_retries, inlier_threshold=a.inlier_threshold),
        final_hypotheses=a.final_hypotheses, use_refiner=not a.no_refiner, optimize_focal=not a.no_focal,
        focal_init=a.focal_init, workers=a.workers,
    )
    return pcfg, mcfg


def cmd_synth(a) -> int:
    cfg = SceneConfig(a.width, a.height, a.focal, FeatureFieldConfig(noise_sigma=a.noise_sigma))
    scene = generate_scene(a.kind, a.views, cfg, a.seed)
    out = Path(a.output)
    save_scene(scene, out)
    report = write_manifest(scene, out.with_name(out.name + ".manifest.json"), out.name)
    print(report.summary())
    print(f"wrote {out} ({scene.n_views} views, diameter {scene.diameter:.4f})")
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_reconstruct(a) -> int:
    pcfg, mcfg = configs_from_args(a)
    inputs = load_inputs(a.scene)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        res = reconstruct(inputs, pcfg, mcfg, progress=lambda m: logging.getLogger("scrsfm").info(m))
    except AllSeedsFailed as exc:
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_RECON
    write_result_poses(out / "poses.txt", res)
    save_state(out / "state.bin", res.state)
    lines = res.report_lines() + [f"wall_seconds={time.perf_counter() - t0:.2f}"]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print(f"registered {int(res.registered.sum())}/{len(res.registered)} views; focal {res.focal:.3f}")
    print(f"wrote {out / 'poses.txt'}, {out / 'state.bin'}, {out / 'report.txt'}")
    return EXIT_OK


def evaluate_files(scene_path, poses_path, delta_t=0.01, delta_r=5.0, inlier_tol=0.05, seed=0):
    scene = load_scene(scene_path)
    recs = {r.view_id: r for r in read_poses(poses_path)}
    ids = list(range(scene.n_views))
    if sorted(recs) != ids:
        missing = sorted(set(ids) - set(recs))
        extra = sorted(set(recs) - set(ids))
        raise ViewMismatch(f"pose file views do not match the scene (missing {missing[:10]}, extra {extra[:10]})")
    est = np.stack([recs[i].matrix34() for i in ids])
    reg = np.array([recs[i].registered for i in ids])
    D = scene.diameter
    return accuracy_report(est, scene.poses, reg, delta_t * D, delta_r, D, inlier_tol * D, seed)


def cmd_eval(a) -> int:
    rep = evaluate_files(a.scene, a.poses, a.delta_t, a.delta_r, a.inlier_tol, a.seed)
    text = rep.to_text()
    if a.output:
        Path(a.output + ".txt").write_text(text)
        Path(a.output + ".csv").write_text(rep.to_csv())
    for k, v in rep.summary().items():
        print(f"{k}={v!r}")
    return EXIT_OK if rep.median_trans < a.pass_bar * rep.diameter else EXIT_CHECK


def cmd_selfcheck(a) -> int:
    checks.FAULTS.clear()
    checks.FAULTS.update(a.inject_fault)
    try:
        ok = checks.run_selfcheck()
    finally:
        checks.FAULTS.clear()
    return EXIT_OK if ok else EXIT_CHECK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2), format="%(message)s")
    try:
        if a.command == "reconstruct" and a.config:
            a = _apply_config_file(parser, "reconstruct", argv, read_config_file(a.config))
        return {"synth": cmd_synth, "reconstruct": cmd_reconstruct, "eval": cmd_eval,
                "selfcheck": cmd_selfcheck}[a.command](a)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (InvalidConfig, ViewMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ScrSfmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
