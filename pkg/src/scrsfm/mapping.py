"""One neural-mapping round: training buffer, learning-rate schedule with
early stopping, and joint optimisation of the scene regressor, the pose
refiner and the focal scale."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyDepth, EmptyInput
from .geometry import backproject_points
from .refiners import FOCAL_GUARD, FocalRefiner, PoseRefiner
from .regressor import MLP, AdamW, LossConfig, hybrid_terms, make_regressor, reprojection_terms
from .seeding import derive_rng

log = logging.getLogger(__name__)

WARMUP, PLATEAU, COOLDOWN, DONE = "warmup", "plateau", "cooldown", "done"


@dataclass(frozen=True)
class MappingConfig:
    """Mapping hyper-parameters.

    Batch size, early-stopping rule and pass/sample counts are the published
    values.  Iteration counts, the buffer cap and the learning-rate endpoints
    are scaled down for desk-size scenes (the published rates plateau too
    noisily here for early stopping to fire); :meth:`published_scale` restores them.
    """

    buffer_cap: int = 200_000
    max_passes: int = 10
    samples_per_view_per_pass: int = 1024
    batch_size: int = 5120
    warmup_iters: int = 200
    lr_low: float = 1e-4
    lr_high: float = 6e-4
    cooldown_iters: int = 1000
    early_stop_window: int = 100
    early_stop_fraction: float = 0.7
    early_stop_threshold: float = 10.0
    max_iters: int = 2500
    refiner_standby_iters: int = 1000
    early_stopping: bool = True
    refiner_lr: float = 1e-3
    refiner_weight_decay: float = 1e-2
    focal_lr: float = 1e-3
    focal_weight_decay: float = 1e-2
    regressor_weight_decay: float = 0.0
    regressor_width: int = 128
    regressor_layers: int = 6
    loss: LossConfig = LossConfig()
    log_every: int = 100

    def __post_init__(self):
        ints = ("buffer_cap", "max_passes", "samples_per_view_per_pass", "batch_size", "cooldown_iters",
                "early_stop_window", "max_iters")
        if any(getattr(self, k) <= 0 for k in ints) or self.warmup_iters < 0 or self.refiner_standby_iters < 0:
            raise ValueError("mapping counts must be positive")
        if not 0 < self.lr_low < self.lr_high:
            raise ValueError("need 0 < lr_low < lr_high")
        if self.cooldown_iters > self.max_iters:
            raise ValueError("cooldown_iters must not exceed max_iters")

    @classmethod
    def published_scale(cls, **overrides) -> "MappingConfig":
        base = cls(buffer_cap=8_000_000, lr_low=5e-4, lr_high=3e-3, warmup_iters=1000, cooldown_iters=5000,
                   max_iters=25_000, refiner_standby_iters=5000)
        return replace(base, **overrides)


@dataclass
class TrainingBuffer:
    view: np.ndarray  # (N,) index into the list of views passed to fill_buffer
    cell: np.ndarray  # (N,) index into that view's lattice arrays
    pixels: np.ndarray  # (N, 2)
    features: np.ndarray  # (N, D)

    def __len__(self):
        return len(self.view)


def fill_buffer(views, cfg: MappingConfig, rng_seed, max_passes=None) -> TrainingBuffer:
    """Sample lattice cells pass by pass until ``max_passes`` or the cap is reached.

    ``views`` are objects with ``pixels`` and ``features`` arrays.
    """
    if not views:
        raise EmptyInput("no views to sample from")
    rng = np.random.default_rng(rng_seed)
    passes = cfg.max_passes if max_passes is None else max_passes
    k = cfg.samples_per_view_per_pass
    vids, cells = [], []
    total = 0
    for _ in range(passes):
        for v in rng.permutation(len(views)):
            n = len(views[v].pixels)
            if n == 0:
                continue
            take = rng.choice(n, size=k, replace=n < k)
            room = cfg.buffer_cap - total
            take = take[:room]
            vids.append(np.full(len(take), v, dtype=np.int64))
            cells.append(take)
            total += len(take)
            if total >= cfg.buffer_cap:
                break
        if total >= cfg.buffer_cap:
            break
    if total == 0:
        raise EmptyInput("views have no lattice samples")
    vid = np.concatenate(vids)
    cell = np.concatenate(cells)
    order = rng.permutation(total)
    vid, cell = vid[order], cell[order]
    D = views[0].features.shape[1]
    pixels = np.empty((total, 2))
    feats = np.empty((total, D))
    for v in np.unique(vid):
        m = vid == v
        pixels[m] = views[v].pixels[cell[m]]
        feats[m] = views[v].features[cell[m]]
    return TrainingBuffer(vid, cell, pixels, feats)


@dataclass
class ScheduleState:
    iteration: int = 0
    phase: str = WARMUP
    consecutive_hits: int = 0
    cooldown_start: int | None = None
    cooldown_from: float | None = None
    early_stopped: bool = False


def lr_at(state: ScheduleState, cfg: MappingConfig) -> float:
    if state.phase == WARMUP:
        frac = min(state.iteration / cfg.warmup_iters, 1.0) if cfg.warmup_iters else 1.0
        return cfg.lr_low + (cfg.lr_high - cfg.lr_low) * frac
    if state.phase == PLATEAU:
        return cfg.lr_high
    if state.phase == COOLDOWN:
        frac = min((state.iteration - state.cooldown_start) / cfg.cooldown_iters, 1.0)
        return state.cooldown_from + (cfg.lr_low - state.cooldown_from) * frac
    return cfg.lr_low


def _enter_cooldown(state, cfg):
    state.cooldown_from = lr_at(state, cfg)
    state.cooldown_start = state.iteration
    state.phase = COOLDOWN


def early_stop_update(state: ScheduleState, errors, cfg: MappingConfig) -> ScheduleState:
    errors = np.asarray(errors)
    if errors.size == 0:
        raise EmptyInput("empty batch")
    hit = np.mean(errors < cfg.early_stop_threshold) >= cfg.early_stop_fraction
    state.consecutive_hits = state.consecutive_hits + 1 if hit else 0
    if (cfg.early_stopping and state.phase in (WARMUP, PLATEAU)
            and state.consecutive_hits >= cfg.early_stop_window):
        _enter_cooldown(state, cfg)
        state.early_stopped = True
    return state


def advance(state: ScheduleState, cfg: MappingConfig) -> ScheduleState:
    """Count one finished batch and apply time-driven phase changes."""
    state.iteration += 1
    if state.phase == WARMUP and state.iteration >= cfg.warmup_iters:
        state.phase = PLATEAU
    if state.phase in (WARMUP, PLATEAU) and state.iteration >= cfg.max_iters - cfg.cooldown_iters:
        _enter_cooldown(state, cfg)
    if state.phase == COOLDOWN and state.iteration - state.cooldown_start >= cfg.cooldown_iters:
        state.phase = DONE
    if state.iteration >= cfg.max_iters:
        state.phase = DONE
    return state


@dataclass
class MappingStats:
    iterations: int = 0
    early_stopped: bool = False
    no_progress: bool = False
    batch_loss: list = field(default_factory=list)  # mean soft-clamped loss per batch
    batch_inlier_fraction: list = field(default_factory=list)
    records: list = field(default_factory=list)  # (iteration, lr, loss, inlier_fraction) every log_every

    @property
    def final_inlier_fraction(self) -> float:
        return self.batch_inlier_fraction[-1] if self.batch_inlier_fraction else 0.0

    def record_lines(self) -> list[str]:
        return [f"iteration={i} lr={lr:.6g} loss={loss:.6g} inlier_fraction={fr:.4f}"
                for i, lr, loss, fr in self.records]


@dataclass
class MappingResult:
    model: MLP
    poses: np.ndarray  # (V, 3, 4) refined camera-to-scene poses
    alpha: float
    stats: MappingStats


def _batches(n, batch, rng):
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - batch + 1, batch):
            yield perm[s:s + batch]


def _sum_by_view(values, inv, n):
    flat = values.reshape(len(inv), -1)
    out = np.stack([np.bincount(inv, weights=flat[:, j], minlength=n) for j in range(flat.shape[1])], axis=1)
    return out.reshape((n,) + values.shape[1:])


def train_mapping(model: MLP, poses_init, buffer: TrainingBuffer, K_init, cfg: MappingConfig, rng_seed,
                  refiner: PoseRefiner | None = None, focal: FocalRefiner | None = None,
                  optimize_focal=True, standby=False) -> MappingResult:
    """Jointly fit regressor, pose refiner and focal scale to the buffer.

    ``poses_init`` (V, 3, 4) are the initial camera-to-scene poses indexed by
    ``buffer.view``.  ``refiner=None`` disables pose refinement.  With
    ``standby`` the refiner is frozen for ``cfg.refiner_standby_iters``.
    ``model`` is updated in place.
    """
    if len(buffer) == 0:
        raise EmptyInput("empty training buffer")
    poses_init = np.asarray(poses_init, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    focal = focal if focal is not None else FocalRefiner(K_init.f)
    cx, cy = K_init.cx, K_init.cy
    batch = min(cfg.batch_size, len(buffer))
    reg_opt = AdamW(model.params(), weight_decay=cfg.regressor_weight_decay)
    ref_opt = AdamW(refiner.params(), lr=cfg.refiner_lr, weight_decay=cfg.refiner_weight_decay) if refiner else None
    alpha = np.array([focal.alpha])
    alpha_opt = AdamW([alpha], lr=cfg.focal_lr, weight_decay=cfg.focal_weight_decay)
    state = ScheduleState()
    stats = MappingStats()
    batches = _batches(len(buffer), batch, rng)

    while state.phase != DONE:
        idx = next(batches)
        lr = lr_at(state, cfg)
        vid = buffer.view[idx]
        touched, inv = np.unique(vid, return_inverse=True)
        Y, cache = model.forward(buffer.features[idx], keep=True)
        if refiner is not None:
            Rv, tv, rcache = refiner.forward(poses_init[touched])
        else:
            Rv, tv = poses_init[touched, :, :3], poses_init[touched, :, 3]
        f = focal.f_init * (1.0 + alpha[0])
        out = reprojection_terms(Y, buffer.pixels[idx], f, cx, cy, Rv[inv], tv[inv], cfg.loss)

        reg_opt.step(model.params(), model.backward(cache, out["d_pred"]), lr=lr)
        refiner_live = refiner is not None and not (standby and state.iteration < cfg.refiner_standby_iters)
        if refiner_live:
            dR = _sum_by_view(out["d_R"], inv, len(touched))
            dt = _sum_by_view(out["d_t"], inv, len(touched))
            ref_opt.step(refiner.params(), refiner.backward(rcache, dR, dt))
        if optimize_focal and not (standby and state.iteration < cfg.refiner_standby_iters):
            old = alpha.copy()
            alpha_opt.step([alpha], [np.array([np.sum(out["d_f"]) * focal.f_init])])
            if not 1.0 + alpha[0] > FOCAL_GUARD:
                alpha[:] = old
        err = out["err"]
        stats.batch_loss.append(float(np.mean(out["loss"])))
        stats.batch_inlier_fraction.append(float(np.mean(err < cfg.early_stop_threshold)))
        early_stop_update(state, err, cfg)
        if state.iteration % cfg.log_every == 0:
            stats.records.append((state.iteration, lr, stats.batch_loss[-1], stats.batch_inlier_fraction[-1]))
        advance(state, cfg)

    focal.alpha = float(alpha[0])
    stats.iterations = state.iteration
    stats.early_stopped = state.early_stopped
    stats.no_progress = not state.early_stopped
    if refiner is not None:
        R, t, _ = refiner.forward(poses_init)
        poses = np.concatenate([R, t[:, :, None]], axis=2)
    else:
        poses = poses_init.copy()
    return MappingResult(model, poses, focal.alpha, stats)


def train_seed(view, K_init, cfg: MappingConfig, rng_seed, max_passes=None):
    """Fit a fresh regressor to one view at identity pose using depth-derived targets.

    Returns ``(model, stats)``.
    """
    depth = getattr(view, "depth", None)
    if depth is None or len(depth) == 0 or not np.all(np.asarray(depth) > 0):
        raise EmptyDepth("seed view needs a positive depth for every lattice cell")
    buffer = fill_buffer([view], cfg, derive_rng(rng_seed, "seed_buffer").integers(2**63), max_passes)
    targets = backproject_points(K_init.f, K_init.cx, K_init.cy, buffer.pixels, depth[buffer.cell])
    rng = derive_rng(rng_seed, "seed_model")
    model = make_regressor(buffer.features.shape[1], rng, cfg.regressor_width, cfg.regressor_layers,
                           out_bias=(0.0, 0.0, float(np.median(depth))))
    opt = AdamW(model.params(), weight_decay=cfg.regressor_weight_decay)
    batch = min(cfg.batch_size, len(buffer))
    R = np.broadcast_to(np.eye(3), (batch, 3, 3))
    t = np.zeros((batch, 3))
    state = ScheduleState()
    stats = MappingStats()
    batches = _batches(len(buffer), batch, rng)
    while state.phase != DONE:
        idx = next(batches)
        lr = lr_at(state, cfg)
        Y, cache = model.forward(buffer.features[idx], keep=True)
        loss, grad, err, _ = hybrid_terms(Y, targets[idx], buffer.pixels[idx], K_init.f, K_init.cx, K_init.cy,
                                          R, t, cfg.loss)
        opt.step(model.params(), model.backward(cache, grad), lr=lr)
        stats.batch_loss.append(float(np.mean(loss)))
        stats.batch_inlier_fraction.append(float(np.mean(err < cfg.early_stop_threshold)))
        early_stop_update(state, err, cfg)
        if state.iteration % cfg.log_every == 0:
            stats.records.append((state.iteration, lr, stats.batch_loss[-1], stats.batch_inlier_fraction[-1]))
        advance(state, cfg)
    stats.iterations = state.iteration
    stats.early_stopped = state.early_stopped
    stats.no_progress = not state.early_stopped
    return model, stats
