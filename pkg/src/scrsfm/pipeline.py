"""Outer reconstruction loop: seed selection, alternating relocalization and
mapping, termination, final refit, plus pose-file and checkpoint I/O."""
from __future__ import annotations

import io
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllSeedsFailed, EmptyInput, FormatError, InvalidConfig
from .geometry import Intrinsics, RigidPose, axis_angle, matrix_from_quaternion, quaternion_from_matrix
from .mapping import MappingConfig, fill_buffer, train_mapping, train_seed
from .pnp import RansacConfig, ransac_pose
from .refiners import FocalRefiner, PoseRefiner, default_focal
from .regressor import MLP, make_regressor, read_model, save_model
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

SEED_MAPPING = MappingConfig(warmup_iters=100, cooldown_iters=500, max_iters=1000)


@dataclass(frozen=True)
class PipelineConfig:
    registration_threshold: int = 500
    final_threshold: int = 1000
    termination_fraction: float = 0.01
    seed_candidates: int = 5
    seed_probe_limit: int = 1000
    rng_seed: int = 0
    ransac: RansacConfig = RansacConfig()
    final_hypotheses: int = 64
    seed_passes: int = 1
    seed_mapping: MappingConfig = SEED_MAPPING
    use_refiner: bool = True
    optimize_focal: bool = True
    focal_init: float | None = None
    # (degrees, scene units) applied to relocalized poses before every mapping round; for ablations
    pose_perturbation: tuple[float, float] | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.registration_threshold <= 0 or self.final_threshold < self.registration_threshold:
            raise InvalidConfig("need 0 < registration_threshold <= final_threshold")
        if not 0 < self.termination_fraction <= 1:
            raise InvalidConfig("termination_fraction must be in (0, 1]")
        if self.seed_candidates < 1 or self.seed_probe_limit < 1:
            raise InvalidConfig("seed_candidates and seed_probe_limit must be positive")

    @property
    def max_rounds(self) -> int:
        return math.ceil(1.0 / self.termination_fraction) + 2

    def worker_count(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get("ACE0_WORKERS", "1")))


@dataclass
class ViewRecord:
    view_id: int
    pose: np.ndarray  # (3, 4) camera-to-scene
    confidence: int = 0
    registered: bool = False


@dataclass
class RoundReport:
    round: int
    registered: int
    mapping_iterations: int = 0
    early_stopped: bool = False
    focal: float = 0.0
    seconds: float = 0.0


@dataclass
class ReconstructionState:
    iteration: int
    model: MLP
    alpha: float
    f_init: float
    records: list[ViewRecord]
    history: list[int] = field(default_factory=list)

    def poses(self) -> np.ndarray:
        return np.stack([r.pose for r in self.records])

    def registered(self) -> np.ndarray:
        return np.array([r.registered for r in self.records], dtype=bool)


@dataclass
class ReconstructionResult:
    state: ReconstructionState
    seed_id: int
    rounds: list[RoundReport]
    termination: str
    final_iterations: int
    seed_rates: dict
    seconds: float

    @property
    def poses(self) -> np.ndarray:
        return self.state.poses()

    @property
    def registered(self) -> np.ndarray:
        return self.state.registered()

    @property
    def confidences(self) -> np.ndarray:
        return np.array([r.confidence for r in self.state.records])

    @property
    def view_ids(self) -> np.ndarray:
        return np.array([r.view_id for r in self.state.records])

    @property
    def focal(self) -> float:
        return self.state.f_init * (1.0 + self.state.alpha)

    @property
    def mapping_iterations(self) -> int:
        return sum(r.mapping_iterations for r in self.rounds) + self.final_iterations

    def unregistered_ids(self) -> list[int]:
        return [r.view_id for r in self.state.records if not r.registered]

    def report_lines(self) -> list[str]:
        lines = [f"seed_view={self.seed_id}"]
        lines += [f"seed_candidate view={k} rate={v:.4f}" for k, v in self.seed_rates.items()]
        for r in self.rounds:
            lines.append(f"round={r.round} registered={r.registered} mapping_iterations={r.mapping_iterations} "
                         f"early_stopped={int(r.early_stopped)} focal={r.focal!r} seconds={r.seconds:.2f}")
        lines.append(f"termination={self.termination}")
        lines.append(f"final_mapping_iterations={self.final_iterations}")
        lines.append(f"final_registered={int(self.registered.sum())} of {len(self.state.records)}")
        lines.append(f"focal={self.focal!r} alpha={self.state.alpha!r}")
        lines.append(f"total_mapping_iterations={self.mapping_iterations}")
        lines.append("unregistered=" + " ".join(str(i) for i in self.unregistered_ids()))
        lines.append(f"seconds={self.seconds:.2f}")
        return lines


def relocalize_all(model: MLP, views, K: Intrinsics, ransac_cfg: RansacConfig, rng_root, workers=1):
    """Estimate a pose for every view against ``model``.

    ``rng_root`` is a tuple of seed-derivation keys; each view draws from
    ``derive_seed(*rng_root, view_id)`` so results do not depend on worker count.
    """
    def one(view):
        Y = model.forward(view.features)
        return ransac_pose(view.pixels, Y, K, ransac_cfg, derive_seed(*rng_root, view.view_id))

    if workers > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, views))
    return [one(v) for v in views]


def select_seed(views, K0: Intrinsics, cfg: PipelineConfig):
    """Train a few candidate seeds and keep the one that relocalizes the most other views.

    Returns ``(seed index, seed model, {view_id: registration rate})``.
    """
    if not views:
        raise EmptyInput("no views")
    n = len(views)
    if n == 1:
        model, _ = train_seed(views[0], K0, cfg.seed_mapping, derive_seed(cfg.rng_seed, "seed", views[0].view_id),
                              cfg.seed_passes)
        return 0, model, {views[0].view_id: 0.0}
    rng = derive_rng(cfg.rng_seed, "seed_select")
    candidates = rng.choice(n, size=min(cfg.seed_candidates, n), replace=False)
    rates, models = {}, {}
    for c in candidates:
        v = views[c]
        model, _ = train_seed(v, K0, cfg.seed_mapping, derive_seed(cfg.rng_seed, "seed", v.view_id), cfg.seed_passes)
        others = np.array([i for i in range(n) if i != c])
        if len(others) > cfg.seed_probe_limit:
            others = np.sort(rng.choice(others, size=cfg.seed_probe_limit, replace=False))
        ests = relocalize_all(model, [views[i] for i in others], K0, cfg.ransac,
                              (cfg.rng_seed, "seed_probe", v.view_id), cfg.worker_count())
        reg = sum(e.inlier_count > cfg.registration_threshold for e in ests)
        rates[int(c)] = reg / len(others)
        models[int(c)] = model
        log.info("seed candidate %d registers %d of %d", v.view_id, reg, len(others))
    best = min(rates, key=lambda c: (-rates[c], views[c].view_id))
    if rates[best] == 0:
        raise AllSeedsFailed(f"no seed candidate registered any other view ({len(rates)} tried)")
    return best, models[best], {views[c].view_id: r for c, r in rates.items()}


def perturb_poses(poses, ids, rot_deg, trans, rng_root):
    """Rotate each pose by ``rot_deg`` about a random axis and shift it by ``trans`` along a random direction."""
    out = np.array(poses, dtype=np.float64, copy=True)
    for k, vid in enumerate(ids):
        rng = derive_rng(*rng_root, int(vid))
        out[k, :, :3] = axis_angle(rng.normal(size=3), rot_deg) @ out[k, :, :3]
        d = rng.normal(size=3)
        out[k, :, 3] += trans * d / np.linalg.norm(d)
    return out


def _apply_estimates(records, ests, threshold):
    for r, e in zip(records, ests):
        r.pose = e.pose.matrix34()
        r.confidence = int(e.inlier_count)
        r.registered = bool(e.inlier_count > threshold)


def _mapping_poses(records, idx, cfg, rng_root):
    poses = np.stack([records[i].pose for i in idx])
    if cfg.pose_perturbation is not None:
        deg, trans = cfg.pose_perturbation
        poses = perturb_poses(poses, [records[i].view_id for i in idx], deg, trans, rng_root)
    return poses


def reconstruct(inputs, cfg: PipelineConfig = PipelineConfig(), mcfg: MappingConfig = MappingConfig(),
                progress=None) -> ReconstructionResult:
    """Reconstruct camera poses, a scene regressor and the focal length from an InputSet."""
    t_start = time.perf_counter()
    views = list(inputs.views)
    if not views:
        raise EmptyInput("no views")
    say = progress or (lambda msg: log.info(msg))
    root = cfg.rng_seed
    workers = cfg.worker_count()
    n = len(views)
    f0 = cfg.focal_init if cfg.focal_init is not None else default_focal(inputs.width, inputs.height)
    K0 = Intrinsics(f0, inputs.width, inputs.height)

    seed_idx, model, seed_rates = select_seed(views, K0, cfg)
    say(f"seed view {views[seed_idx].view_id}")
    depth_prior = float(np.median(views[seed_idx].depth))
    records = [ViewRecord(v.view_id, RigidPose.identity().matrix34()) for v in views]
    records[seed_idx].registered = True
    state = ReconstructionState(0, model, 0.0, f0, records)
    rounds = []
    termination = "max_rounds"

    for t in range(cfg.max_rounds):
        tic = time.perf_counter()
        K = K0.with_focal(f0 * (1.0 + state.alpha))
        ests = relocalize_all(state.model, views, K, cfg.ransac, (root, "reloc", t), workers)
        _apply_estimates(state.records, ests, cfg.registration_threshold)
        count = int(state.registered().sum())
        prev = state.history[-1] if state.history else None
        state.history.append(count)
        state.iteration = t
        rep = RoundReport(t, count, focal=K.f)
        rounds.append(rep)
        say(f"round {t}: {count}/{n} registered")
        if count == n:
            termination = "all_registered"
            rep.seconds = time.perf_counter() - tic
            break
        if prev is not None and count - prev < cfg.termination_fraction * n:
            termination = "below_fraction"
            rep.seconds = time.perf_counter() - tic
            break
        if t == cfg.max_rounds - 1:
            rep.seconds = time.perf_counter() - tic
            break
        idx = np.flatnonzero(state.registered())
        res = _map_round(state, views, idx, K0, cfg, mcfg, (root, "map", t), standby=False)
        rep.mapping_iterations = res.stats.iterations
        rep.early_stopped = res.stats.early_stopped
        rep.seconds = time.perf_counter() - tic

    # final refit from a freshly initialised network
    tic = time.perf_counter()
    idx = np.flatnonzero(state.registered())
    if len(idx) == 0:
        idx = np.array([seed_idx])
    init_poses = np.stack([state.records[i].pose for i in idx])
    prior = np.mean(init_poses[:, :, :3] @ np.array([0.0, 0.0, depth_prior]) + init_poses[:, :, 3], axis=0)
    state.model = make_regressor(views[0].features.shape[1], derive_rng(root, "final_model"), mcfg.regressor_width,
                                 mcfg.regressor_layers, out_bias=prior)
    res = _map_round(state, views, idx, K0, cfg, mcfg, (root, "final"), standby=True)
    final_iters = res.stats.iterations
    say(f"final refit: {final_iters} iterations")

    K = K0.with_focal(f0 * (1.0 + state.alpha))
    final_cfg = replace(cfg.ransac, hypotheses=cfg.final_hypotheses)
    ests = relocalize_all(state.model, views, K, final_cfg, (root, "final_reloc"), workers)
    _apply_estimates(state.records, ests, cfg.final_threshold)
    say(f"final: {int(state.registered().sum())}/{n} registered, {time.perf_counter() - tic:.1f}s")
    return ReconstructionResult(state, views[seed_idx].view_id, rounds, termination, final_iters, seed_rates,
                                time.perf_counter() - t_start)


def _map_round(state, views, idx, K0, cfg, mcfg, key, standby):
    poses = _mapping_poses(state.records, idx, cfg, key + ("perturb",))
    buf = fill_buffer([views[i] for i in idx], mcfg, derive_seed(*key, "buffer"))
    refiner = PoseRefiner(derive_rng(*key, "refiner")) if cfg.use_refiner else None
    focal = FocalRefiner(state.f_init, state.alpha)
    res = train_mapping(state.model, poses, buf, K0, mcfg, derive_seed(*key, "train"), refiner, focal,
                        optimize_focal=cfg.optimize_focal, standby=standby)
    state.model = res.model
    state.alpha = res.alpha
    for k, i in enumerate(idx):
        state.records[i].pose = res.poses[k]
    return res


# ---- pose file ---------------------------------------------------------------

def format_pose_line(view_id, pose, confidence, registered) -> str:
    pose = np.asarray(pose, dtype=np.float64)
    q = quaternion_from_matrix(pose[:, :3])
    vals = [repr(float(x)) for x in (*q, *pose[:, 3])]
    return f"{int(view_id)} {' '.join(vals)} {int(confidence)} {int(bool(registered))}"


def write_poses(path_or_file, view_ids, poses, confidences, registered):
    lines = [format_pose_line(*row) for row in zip(view_ids, poses, confidences, registered)]
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", encoding="ascii") as fh:
            fh.write(text)


def write_result_poses(path, result: ReconstructionResult):
    write_poses(path, result.view_ids, result.poses, result.confidences, result.registered)


@dataclass
class PoseRecord:
    view_id: int
    quaternion: np.ndarray
    t: np.ndarray
    confidence: int
    registered: bool

    def matrix34(self) -> np.ndarray:
        return np.concatenate([matrix_from_quaternion(self.quaternion), self.t[:, None]], axis=1)


def read_poses(path) -> list[PoseRecord]:
    out = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 10:
                raise FormatError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            try:
                vals = [float(x) for x in parts[1:8]]
                out.append(PoseRecord(int(parts[0]), np.array(vals[:4]), np.array(vals[4:]), int(parts[8]),
                                      bool(int(parts[9]))))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


# ---- state checkpoint ---------------------------------------------------------

STATE_MAGIC = b"SCRSTATE"
STATE_VERSION = 1


def save_state(path, state: ReconstructionState):
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<IIddI", STATE_VERSION, state.iteration, state.alpha, state.f_init, len(state.records)))
    for r in state.records:
        buf.write(struct.pack("<IqB", r.view_id, r.confidence, int(r.registered)))
        buf.write(np.asarray(r.pose, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(state.history)))
    buf.write(np.asarray(state.history, dtype="<i8").tobytes())
    save_model(state.model, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_state(path) -> ReconstructionState:
    with open(path, "rb") as fh:
        if fh.read(len(STATE_MAGIC)) != STATE_MAGIC:
            raise FormatError(f"{path}: not a state checkpoint")
        head = fh.read(struct.calcsize("<IIddI"))
        version, iteration, alpha, f_init, n = struct.unpack("<IIddI", head)
        if version != STATE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        records = []
        for _ in range(n):
            vid, conf, reg = struct.unpack("<IqB", fh.read(struct.calcsize("<IqB")))
            pose = np.frombuffer(fh.read(96), dtype="<f8").reshape(3, 4).astype(np.float64)
            records.append(ViewRecord(vid, pose, conf, bool(reg)))
        (h,) = struct.unpack("<I", fh.read(4))
        history = np.frombuffer(fh.read(8 * h), dtype="<i8").tolist()
        model = read_model(fh)
    return ReconstructionState(iteration, model, alpha, f_init, records, history)
