"""Robust camera pose from 2D-3D correspondences.

P3P (Grunert's distance quartic) generates minimal hypotheses inside a
RANSAC loop; the winning hypothesis is polished by Levenberg-damped
Gauss-Newton on a growing inlier set.  Correspondences are passed as two
arrays, ``pixels`` (n, 2) and ``points`` (n, 3).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSample, InsufficientInliers, NoRealSolution
from .geometry import EPS_DEPTH, Intrinsics, RigidPose, project_points, so3_exp


@dataclass(frozen=True)
class RansacConfig:
    hypotheses: int = 32
    max_retries: int = 16
    inlier_threshold: float = 10.0
    refine_rounds_max: int = 8
    min_sample_inliers: int = 4

    def __post_init__(self):
        if self.hypotheses < 1:
            raise ValueError("hypotheses must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass
class PoseEstimate:
    pose: RigidPose
    inlier_count: int
    converged: bool


def bearings(K: Intrinsics, pixels) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    rays = np.stack(
        [(pixels[..., 0] - K.cx) / K.f, (pixels[..., 1] - K.cy) / K.f, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def _quartic_real_roots(coeffs):
    """Real roots of a batch of quartics (N, 5), highest degree first.

    Returns (N, 4) roots and a validity mask.  Roots are polished with two
    Newton steps on the original polynomial.
    """
    n = coeffs.shape[0]
    lead = coeffs[:, 0]
    scale = np.abs(coeffs).max(axis=1)
    ok = np.isfinite(coeffs).all(axis=1) & (np.abs(lead) > 1e-14 * np.maximum(scale, 1e-300))
    roots = np.zeros((n, 4))
    valid = np.zeros((n, 4), dtype=bool)
    if not ok.any():
        return roots, valid
    c = coeffs[ok] / lead[ok, None]
    comp = np.zeros((c.shape[0], 4, 4))
    comp[:, 0, :] = -c[:, 1:]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    ev = np.linalg.eigvals(comp)
    re = ev.real
    is_real = np.abs(ev.imag) <= 1e-6 * (1.0 + np.abs(re))
    for _ in range(2):
        p = (((c[:, 0:1] * re + c[:, 1:2]) * re + c[:, 2:3]) * re + c[:, 3:4]) * re + c[:, 4:5]
        dp = ((4 * c[:, 0:1] * re + 3 * c[:, 1:2]) * re + 2 * c[:, 2:3]) * re + c[:, 3:4]
        step = np.where(np.abs(dp) > 1e-300, p / np.where(dp == 0, 1.0, dp), 0.0)
        re = np.where(is_real, re - step, re)
    roots[ok] = re
    valid[ok] = is_real
    return roots, valid


def _kabsch_rigid(P, X):
    """Batched rigid fit X ~ R P + t for (N, k, 3) arrays."""
    mp = P.mean(axis=1, keepdims=True)
    mx = X.mean(axis=1, keepdims=True)
    H = np.einsum("nki,nkj->nij", P - mp, X - mx)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("nij,njk->nik", U, Vt).transpose(0, 2, 1)))
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = np.where(d == 0, 1.0, d)
    R = np.einsum("nji,njk,nlk->nil", Vt, D, U)
    t = mx[:, 0] - np.einsum("nij,nj->ni", R, mp[:, 0])
    return R, t


def _polish_distances(s, a2, b2, c2, ca, cb, cg, iters=3):
    """Newton iterations on the three law-of-cosines equations (s: (N, 4, 3))."""
    ca, cb, cg = ca[:, None], cb[:, None], cg[:, None]
    target = np.stack([c2, b2, a2], axis=-1)[:, None, :]
    for _ in range(iters):
        s1, s2, s3 = s[..., 0], s[..., 1], s[..., 2]
        F = np.stack(
            [s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg,
             s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb,
             s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca], axis=-1) - target
        z = np.zeros_like(s1)
        J = np.stack(
            [np.stack([2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, z], axis=-1),
             np.stack([2 * s1 - 2 * s3 * cb, z, 2 * s3 - 2 * s1 * cb], axis=-1),
             np.stack([z, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca], axis=-1)], axis=-2)
        det = np.linalg.det(J)
        ok = np.abs(det) > 1e-12 * np.maximum(np.abs(s).max(axis=-1), 1.0) ** 2
        J = np.where(ok[..., None, None], J, np.eye(3))
        step = np.linalg.solve(J, F[..., None])[..., 0]
        s = s - np.where(ok[..., None], step, 0.0)
    return s


def _p3p_batch(rays, P):
    """Grunert P3P for a batch of samples.

    rays: (N, 3, 3) unit bearings, P: (N, 3, 3) scene points.
    Returns camera-to-scene rotations (N, 4, 3, 3), translations (N, 4, 3)
    and a validity mask (N, 4).
    """
    n = rays.shape[0]
    a2 = np.sum((P[:, 1] - P[:, 2]) ** 2, axis=1)
    b2 = np.sum((P[:, 0] - P[:, 2]) ** 2, axis=1)
    c2 = np.sum((P[:, 0] - P[:, 1]) ** 2, axis=1)
    ca = np.sum(rays[:, 1] * rays[:, 2], axis=1)
    cb = np.sum(rays[:, 0] * rays[:, 2], axis=1)
    cg = np.sum(rays[:, 0] * rays[:, 1], axis=1)

    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    A4 = (p - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (
        p**2 - 1 + 2 * p**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
        - 4 * q * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2
    )
    A1 = 4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - q) * ca * cg)
    A0 = (1 + p) ** 2 - 4 * a2 / b2 * cg**2
    v, valid = _quartic_real_roots(np.stack([A4, A3, A2, A1, A0], axis=1))

    den = 2 * (cg[:, None] - v * ca[:, None])
    valid &= np.abs(den) > 1e-12
    den = np.where(valid, den, 1.0)
    u = ((p[:, None] - 1) * v**2 - 2 * p[:, None] * cb[:, None] * v + 1 + p[:, None]) / den
    s1sq = c2[:, None] / (1 + u**2 - 2 * u * cg[:, None])
    valid &= (s1sq > 0) & (u > 0) & (v > 0) & np.isfinite(s1sq)
    s1 = np.sqrt(np.where(valid, s1sq, 1.0))
    s = np.stack([s1, u * s1, v * s1], axis=-1)  # (N, 4, 3)
    s = np.where(valid[..., None], s, 1.0)
    s = _polish_distances(s, a2, b2, c2, ca, cb, cg)
    X = s[..., None] * rays[:, None, :, :]  # (N, 4, 3, 3) camera-frame points
    Rc, tc = _kabsch_rigid(np.repeat(P, 4, axis=0), X.reshape(n * 4, 3, 3))
    R = Rc.transpose(0, 2, 1)
    t = -np.einsum("nij,nj->ni", R, tc)
    return R.reshape(n, 4, 3, 3), t.reshape(n, 4, 3), valid


def _sample_degenerate(P, px):
    """Mask of samples (N, 3, ...) that are collinear or have duplicate pixels."""
    area = 0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1)
    d = np.stack(
        [np.linalg.norm(px[:, i] - px[:, j], axis=1) for i, j in ((0, 1), (0, 2), (1, 2))], axis=1
    )
    return (area <= 1e-9) | (d.min(axis=1) <= 1e-9)


def solve_p3p(pixels, points, K: Intrinsics) -> list[RigidPose]:
    """All pose candidates (at most 4) consistent with three correspondences."""
    px = np.asarray(pixels, dtype=np.float64).reshape(1, 3, 2)
    P = np.asarray(points, dtype=np.float64).reshape(1, 3, 3)
    if _sample_degenerate(P, px)[0]:
        raise DegenerateSample("collinear scene points or duplicate pixels")
    R, t, valid = _p3p_batch(bearings(K, px), P)
    out = []
    for k in np.flatnonzero(valid[0]):
        uv, z = project_points(K.f, K.cx, K.cy, R[0, k], t[0, k], P[0])
        if np.all(z > EPS_DEPTH) and np.all(np.isfinite(uv)):
            out.append(RigidPose(R[0, k], t[0, k]))
    if not out:
        raise NoRealSolution("quartic has no admissible real root")
    return out


def reprojection_errors(pose: RigidPose, pixels, points, K: Intrinsics) -> np.ndarray:
    """Per-correspondence pixel error; ``inf`` for points behind the camera."""
    uv, z = project_points(K.f, K.cx, K.cy, pose.R, pose.t, points)
    err = np.linalg.norm(uv - pixels, axis=-1)
    return np.where(z > EPS_DEPTH, err, np.inf)


def count_inliers(pose: RigidPose, pixels, points, K: Intrinsics, threshold: float) -> int:
    return int(np.count_nonzero(reprojection_errors(pose, pixels, points, K) < threshold))


def _lm_refine(Rc, tc, pixels, points, f, cx, cy):
    """Damped Gauss-Newton on world-to-camera (Rc, tc); minimises squared pixel error."""

    def residuals(Rc, tc):
        xc = points @ Rc.T + tc
        z = xc[:, 2]
        if np.any(z <= EPS_DEPTH):
            return None, xc
        r = np.stack([f * xc[:, 0] / z + cx, f * xc[:, 1] / z + cy], axis=1) - pixels
        return r, xc

    r, xc = residuals(Rc, tc)
    if r is None:
        return Rc, tc
    cost = float(np.sum(r * r))
    lam = 1e-3
    for _ in range(100):
        x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
        iz = 1.0 / z
        J = np.zeros((len(z), 2, 6))
        # d(uv)/d(xc) @ [-[xc]_x | I]
        J[:, 0, 0] = -f * x * y * iz**2
        J[:, 0, 1] = f * (1 + x * x * iz**2)
        J[:, 0, 2] = -f * y * iz
        J[:, 0, 3] = f * iz
        J[:, 0, 5] = -f * x * iz**2
        J[:, 1, 0] = -f * (1 + y * y * iz**2)
        J[:, 1, 1] = f * x * y * iz**2
        J[:, 1, 2] = f * x * iz
        J[:, 1, 4] = f * iz
        J[:, 1, 5] = -f * y * iz**2
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf
        g = Jf.T @ r.reshape(-1)
        try:
            step = np.linalg.solve(H + lam * np.eye(6), -g)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        dR = so3_exp(step[:3])
        Rn, tn = dR @ Rc, dR @ tc + step[3:]
        rn, xcn = residuals(Rn, tn)
        cost_n = np.inf if rn is None else float(np.sum(rn * rn))
        if cost_n < cost:
            Rc, tc, r, xc, cost = Rn, tn, rn, xcn, cost_n
            lam = max(lam / 10, 1e-12)
        else:
            lam *= 10
            if lam > 1e16:
                break
        if np.linalg.norm(step) < 1e-10:
            break
    return Rc, tc


def refine_pose(pose: RigidPose, pixels, points, K: Intrinsics, cfg: RansacConfig) -> PoseEstimate:
    """Iteratively re-solve on the growing inlier set.

    The returned inlier count is never below the entry count: a round that
    loses inliers is discarded.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    err = reprojection_errors(pose, pixels, points, K)
    mask = err < cfg.inlier_threshold
    best_count = int(mask.sum())
    if best_count < cfg.min_sample_inliers:
        raise InsufficientInliers(f"{best_count} inliers < {cfg.min_sample_inliers}")
    best = pose
    for _ in range(cfg.refine_rounds_max):
        Rc, tc = best.R.T, -best.R.T @ best.t
        Rc, tc = _lm_refine(Rc, tc, pixels[mask], points[mask], K.f, K.cx, K.cy)
        cand = RigidPose(Rc.T, -Rc.T @ tc)
        err = reprojection_errors(cand, pixels, points, K)
        new_mask = err < cfg.inlier_threshold
        count = int(new_mask.sum())
        if count < best_count:
            break
        grew = count > best_count
        best, best_count, mask = cand, count, new_mask
        if not grew:
            break
    return PoseEstimate(best, best_count, True)


def ransac_pose(pixels, points, K: Intrinsics, cfg: RansacConfig, rng_seed) -> PoseEstimate:
    """Hypothesise-and-verify pose estimation; never raises on bad data."""
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    finite = np.isfinite(pixels).all(axis=1) & np.isfinite(points).all(axis=1)
    if not finite.all():
        # non-finite correspondences can never be inliers
        pixels, points = pixels[finite], points[finite]
    n = len(pixels)
    fail = PoseEstimate(RigidPose.identity(), 0, False)
    if n < 4:
        return fail
    rng = np.random.default_rng(rng_seed)
    rays_all = bearings(K, pixels)
    thr = cfg.inlier_threshold

    hyp_R = np.zeros((cfg.hypotheses, 3, 3))
    hyp_t = np.zeros((cfg.hypotheses, 3))
    have = np.zeros(cfg.hypotheses, dtype=bool)
    pending = np.arange(cfg.hypotheses)
    for _ in range(cfg.max_retries + 1):
        if len(pending) == 0:
            break
        idx = rng.integers(0, n, size=(len(pending), 4))
        s = np.sort(idx, axis=1)
        ok = np.all(s[:, 1:] != s[:, :-1], axis=1)
        P = points[idx[:, :3]]
        px = pixels[idx[:, :3]]
        ok &= ~_sample_degenerate(P, px)
        with np.errstate(all="ignore"):
            R, t, valid = _p3p_batch(rays_all[idx[:, :3]], P)
            valid &= ok[:, None] & np.isfinite(R).all(axis=(2, 3)) & np.isfinite(t).all(axis=2)
            # every candidate must reproject all four sample points within the threshold
            uv, z = project_points(
                K.f, K.cx, K.cy, R[:, :, None], t[:, :, None], points[idx][:, None, :, :]
            )
            e = np.linalg.norm(uv - pixels[idx][:, None, :, :], axis=-1)
            e = np.where(z > EPS_DEPTH, e, np.inf)
        e = np.where(valid[..., None], e, np.inf)
        e4 = e[..., 3]
        good = np.all(e < thr, axis=-1)
        e4 = np.where(good, e4, np.inf)
        k = np.argmin(e4, axis=1)
        success = np.isfinite(e4[np.arange(len(pending)), k])
        slots = pending[success]
        hyp_R[slots] = R[success, k[success]]
        hyp_t[slots] = t[success, k[success]]
        have[slots] = True
        pending = pending[~success]

    slots = np.flatnonzero(have)
    if len(slots) == 0:
        return fail
    uv, z = project_points(K.f, K.cx, K.cy, hyp_R[slots, None], hyp_t[slots, None], points[None])
    err = np.linalg.norm(uv - pixels[None], axis=-1)
    err = np.where(z > EPS_DEPTH, err, np.inf)
    inl = err < thr
    counts = inl.sum(axis=1)
    mean_err = np.where(counts > 0, np.where(inl, err, 0.0).sum(axis=1) / np.maximum(counts, 1), np.inf)
    # max count, then lower mean inlier error, then sampling order
    order = np.lexsort((slots, mean_err, -counts))
    b = order[0]
    best = RigidPose(hyp_R[slots[b]], hyp_t[slots[b]])
    if counts[b] < cfg.min_sample_inliers:
        return PoseEstimate(best, int(counts[b]), False)
    return refine_pose(best, pixels, points, K, cfg)
