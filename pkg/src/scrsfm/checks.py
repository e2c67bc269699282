"""Numerical oracles shared by ``selfcheck`` and the test-suite: finite-difference
gradient checks, a synthetic PnP oracle and similarity-recovery checks."""
from __future__ import annotations

import time

import numpy as np

from .evaluation import SimilarityTransform, kabsch_umeyama
from .geometry import Intrinsics, RigidPose, backproject_points, pose_error, random_rotation
from .pnp import RansacConfig, ransac_pose
from .refiners import PoseRefiner
from .regressor import LossConfig, euclidean_terms, make_regressor, reprojection_terms

FD_STEP = 1e-5
# names of deliberately broken paths, for exercising the failure branch of selfcheck
FAULTS: set[str] = set()


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def central_diff(fn, x, idx=None, h=FD_STEP):
    """Central differences of scalar ``fn`` w.r.t. entries ``idx`` (flat indices) of array ``x``, in place-safe."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def _fault(name, g):
    return g * (1.0 + 1e-3) if name in FAULTS else g


def _random_correspondence(rng, n=1):
    """Camera pose, focal and ``n`` predictions that reproject 1-60 px away from their pixels."""
    f = rng.uniform(300, 800)
    K = Intrinsics(f, 640, 480)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    pix = rng.uniform([0, 0], [640, 480], size=(n, 2))
    ang = rng.uniform(0, 2 * np.pi, n)
    off = rng.uniform(1, 60, n)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    xc = backproject_points(f, K.cx, K.cy, pix + off, rng.uniform(1, 10, n))
    pred = xc @ R.T + t
    return K, R, t, pix, pred


def grad_reprojection(n_configs=100, seed=0, cfg=LossConfig()) -> float:
    """Worst relative error of d/d(pred, R, t, f) of the soft-clamped loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        K, R, t, pix, pred = _random_correspondence(rng)
        f = np.array([K.f])

        def loss():
            return float(reprojection_terms(pred, pix, f[0], K.cx, K.cy, R[None], t[None], cfg)["loss"][0])

        out = reprojection_terms(pred, pix, f[0], K.cx, K.cy, R[None], t[None], cfg)
        ana = np.concatenate([out["d_pred"][0], out["d_R"][0].ravel(), out["d_t"][0], out["d_f"]])
        num = np.concatenate([central_diff(loss, pred), central_diff(loss, R), central_diff(loss, t),
                              central_diff(loss, f)])
        worst = max(worst, rel_err(_fault("reprojection", ana), num))
    return worst


def grad_euclidean(n_configs=100, seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        pred = rng.normal(size=3) * rng.uniform(0.1, 10)
        target = rng.normal(size=3) * rng.uniform(0.1, 10)
        _, g = euclidean_terms(pred, target)
        num = central_diff(lambda: float(euclidean_terms(pred, target)[0]), pred)
        worst = max(worst, rel_err(_fault("euclidean", g), num))
    return worst


def _sampled_param_check(params, grads, loss, rng, per_tensor=2):
    ana, num = [], []
    for p, g in zip(params, grads):
        idx = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        ana.append(g.reshape(-1)[idx])
        num.append(central_diff(loss, p, idx))
    return np.concatenate(ana), np.concatenate(num)


def grad_regressor(n_configs=100, seed=0, n_points=16, cfg=LossConfig()) -> float:
    """Regressor weights through the soft-clamped reprojection loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        K, R, t, pix, target = _random_correspondence(rng, n_points)
        model = make_regressor(8, rng, hidden=16, layers=3)
        X = rng.normal(size=(n_points, 8))
        # offset the output so predictions start near their targets
        model.biases[-1][:] = np.mean(target - model.forward(X), axis=0)
        Rb, tb = np.broadcast_to(R, (n_points, 3, 3)), np.broadcast_to(t, (n_points, 3))

        def loss():
            return float(np.sum(reprojection_terms(model.forward(X), pix, K.f, K.cx, K.cy, Rb, tb, cfg)["loss"]))

        Y, cache = model.forward(X, keep=True)
        out = reprojection_terms(Y, pix, K.f, K.cx, K.cy, Rb, tb, cfg)
        grads = model.backward(cache, out["d_pred"])
        a, n = _sampled_param_check(model.params(), grads, loss, rng)
        worst = max(worst, rel_err(_fault("regressor", a), n))
    return worst


def grad_refiner(n_configs=100, seed=0, n_points=16, cfg=LossConfig()) -> float:
    """Pose-refiner weights through Gram-Schmidt and the reprojection loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        ref = PoseRefiner(rng, hidden=16, layers=4)
        last = ref.mlp.weights[-1]
        last[:] = rng.uniform(-0.05, 0.05, size=last.shape)
        T0 = np.concatenate([random_rotation(rng), rng.normal(size=(3, 1))], axis=1)[None]
        R, t, _ = ref.forward(T0)
        K, _, _, pix, _ = _random_correspondence(rng, n_points)
        ang = rng.uniform(0, 2 * np.pi, n_points)
        off = rng.uniform(1, 60, n_points)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
        pred = backproject_points(K.f, K.cx, K.cy, pix + off, rng.uniform(1, 10, n_points)) @ R[0].T + t[0]

        def loss():
            Rr, tr, _ = ref.forward(T0)
            return float(np.sum(reprojection_terms(pred, pix, K.f, K.cx, K.cy, np.repeat(Rr, n_points, 0),
                                                   np.repeat(tr, n_points, 0), cfg)["loss"]))

        Rr, tr, cache = ref.forward(T0)
        out = reprojection_terms(pred, pix, K.f, K.cx, K.cy, np.repeat(Rr, n_points, 0), np.repeat(tr, n_points, 0),
                                 cfg)
        grads = ref.backward(cache, out["d_R"].sum(0, keepdims=True), out["d_t"].sum(0, keepdims=True))
        a, n = _sampled_param_check(ref.params(), grads, loss, rng)
        worst = max(worst, rel_err(_fault("refiner", a), n))
    return worst


def grad_focal(n_configs=100, seed=0, n_points=16, cfg=LossConfig()) -> float:
    """Focal scale alpha, with f = f_init * (1 + alpha)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        K, R, t, pix, pred = _random_correspondence(rng, n_points)
        f_init = K.f / rng.uniform(0.8, 1.2)
        alpha = np.array([K.f / f_init - 1.0])
        Rb, tb = np.broadcast_to(R, (n_points, 3, 3)), np.broadcast_to(t, (n_points, 3))

        def loss():
            f = f_init * (1.0 + alpha[0])
            return float(np.sum(reprojection_terms(pred, pix, f, K.cx, K.cy, Rb, tb, cfg)["loss"]))

        out = reprojection_terms(pred, pix, f_init * (1.0 + alpha[0]), K.cx, K.cy, Rb, tb, cfg)
        ana = np.array([np.sum(out["d_f"]) * f_init])
        worst = max(worst, rel_err(_fault("focal", ana), central_diff(loss, alpha)))
    return worst


def pnp_trial_estimate(seed, n_points=200, outlier_fraction=0.0, cfg=RansacConfig(), K=Intrinsics(560.0, 640, 480)):
    """Random camera and forward-rendered correspondences; returns (estimate, ground-truth pose).

    Outliers get a pixel at least 50 px away from the true projection.
    """
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    t = rng.normal(size=3) * 2.0
    pix = rng.uniform([0, 0], [K.width, K.height], size=(n_points, 2))
    xc = backproject_points(K.f, K.cx, K.cy, pix, rng.uniform(1, 10, n_points))
    pts = xc @ R.T + t
    n_out = int(round(outlier_fraction * n_points))
    if n_out:
        bad = rng.choice(n_points, n_out, replace=False)
        ang = rng.uniform(0, 2 * np.pi, n_out)
        dist = rng.uniform(50, 400, n_out)
        pix = pix.copy()
        pix[bad] += dist[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    est = ransac_pose(pix, pts, K, cfg, rng.integers(2**63))
    return est, RigidPose(R, t)


def pnp_trial(seed, n_points=200, outlier_fraction=0.0, cfg=RansacConfig(), K=Intrinsics(560.0, 640, 480)):
    """(rotation error deg, translation error) of one seeded PnP trial."""
    est, gt = pnp_trial_estimate(seed, n_points, outlier_fraction, cfg, K)
    return pose_error(est.pose, gt)


def pnp_success_count(trials, outlier_fraction=0.0, seed=0, rot_tol=1e-4, trans_tol=1e-6) -> int:
    ok = 0
    for k in range(trials):
        r, t = pnp_trial(seed * 1_000_003 + k, outlier_fraction=outlier_fraction)
        ok += r < rot_tol and t < trans_tol
    return ok


def random_similarity(rng) -> SimilarityTransform:
    return SimilarityTransform(float(np.exp(rng.uniform(-2, 2))), random_rotation(rng), rng.normal(size=3) * 5)


def kabsch_recovery(trials=100, seed=0) -> float:
    """Worst deviation of recovered (s, R, t) from a constructed similarity."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        g = random_similarity(rng)
        X = rng.normal(size=(rng.integers(3, 50), 3)) * 3
        T = kabsch_umeyama(X, g.apply(X))
        err = max(abs(T.s - g.s) / g.s, np.abs(T.R - g.R).max(), np.abs(T.t - g.t).max() / max(1.0, g.s))
        if "kabsch" in FAULTS:
            err += 1e-6
        worst = max(worst, err)
    return worst


def registry():
    """(name, callable -> (passed, detail)) for the quick self-check suite."""
    def grad(fn, tol=1e-4):
        def run():
            e = fn()
            return e < tol, f"max relative error {e:.2e} (tol {tol:g})"
        return run

    def pnp(frac, need, trials):
        def run():
            n = pnp_success_count(trials, frac)
            return n >= need, f"{n}/{trials} recovered"
        return run

    def kabsch():
        e = kabsch_recovery()
        return e < 1e-10, f"worst deviation {e:.2e}"

    return [
        ("gradient/reprojection", grad(grad_reprojection)),
        ("gradient/euclidean", grad(grad_euclidean, 1e-6)),
        ("gradient/regressor", grad(grad_regressor)),
        ("gradient/refiner", grad(grad_refiner)),
        ("gradient/focal", grad(grad_focal)),
        ("pnp/noiseless", pnp(0.0, 99, 100)),
        ("pnp/outliers50", pnp(0.5, 98, 100)),
        ("kabsch/recovery", kabsch),
    ]


def run_selfcheck(out=print) -> bool:
    ok_all = True
    checks = registry()
    t0 = time.perf_counter()
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    out(f"{sum(1 for _ in checks)} checks, {'all passed' if ok_all else 'FAILURES'} "
        f"in {time.perf_counter() - t0:.1f}s")
    return ok_all
