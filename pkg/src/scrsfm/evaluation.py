"""Similarity alignment of estimated cameras to ground truth and pose-accuracy reports."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, ViewMismatch
from .geometry import rotation_angle_deg


@dataclass
class SimilarityTransform:
    s: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, x):
        return self.s * np.asarray(x) @ self.R.T + self.t

    def apply_poses(self, poses):
        """Re-gauge camera-to-scene poses (V, 3, 4)."""
        poses = np.asarray(poses, dtype=np.float64)
        out = np.empty_like(poses)
        out[:, :, :3] = self.R @ poses[:, :, :3]
        out[:, :, 3] = self.apply(poses[:, :, 3])
        return out

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M


def kabsch_umeyama(est, gt) -> SimilarityTransform:
    """Least-squares similarity with s*R*est + t ~ gt."""
    X = np.asarray(est, dtype=np.float64)
    Y = np.asarray(gt, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("expected two (N, 3) arrays of equal shape")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    sy = np.linalg.svd(Yc, compute_uv=False)
    if sx[1] <= 1e-9 * max(sx[0], 1e-300) or sy[1] <= 1e-9 * max(sy[0], 1e-300):
        raise DegenerateConfiguration("point set is collinear or coincident")
    n = len(X)
    U, D, Vt = np.linalg.svd(Yc.T @ Xc / n)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    var_x = np.sum(Xc * Xc) / n
    s = float(np.sum(D * S) / var_x)
    t = my - s * R @ mx
    return SimilarityTransform(s, R, t)


def bbox_diameter(points) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(points.max(0) - points.min(0)))


def ransac_similarity(est, gt, iterations=1000, inlier_tol=None, rng_seed=0):
    """Kabsch hypotheses from random triplets, best by inlier count, refit on inliers.

    ``inlier_tol`` defaults to 5% of the ground-truth bounding-box diagonal.
    Returns ``(transform, inlier_mask)``.
    """
    X = np.asarray(est, dtype=np.float64)
    Y = np.asarray(gt, dtype=np.float64)
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    if inlier_tol is None:
        inlier_tol = 0.05 * bbox_diameter(Y)
    rng = np.random.default_rng(rng_seed)
    best, best_count = None, -1
    for _ in range(iterations):
        idx = rng.choice(len(X), 3, replace=False)
        try:
            T = kabsch_umeyama(X[idx], Y[idx])
        except DegenerateConfiguration:
            continue
        count = int(np.sum(np.linalg.norm(T.apply(X) - Y, axis=1) < inlier_tol))
        if count > best_count:
            best, best_count = T, count
    if best is None:
        raise DegenerateConfiguration("no non-degenerate hypothesis")
    mask = np.linalg.norm(best.apply(X) - Y, axis=1) < inlier_tol
    if mask.sum() >= 3:
        try:
            best = kabsch_umeyama(X[mask], Y[mask])
            mask = np.linalg.norm(best.apply(X) - Y, axis=1) < inlier_tol
        except DegenerateConfiguration:
            pass
    return best, mask


@dataclass
class AccuracyReport:
    rot_err: np.ndarray  # degrees, per view (nan for unregistered)
    trans_err: np.ndarray  # scene units, per view
    registered: np.ndarray
    transform: SimilarityTransform
    delta_t: float
    delta_r: float
    inlier_tol: float
    diameter: float
    alignment_inliers: int
    view_ids: np.ndarray | None = None

    @property
    def registration_rate(self) -> float:
        return float(np.mean(self.registered)) if len(self.registered) else 0.0

    @property
    def median_rot(self) -> float:
        r = self.rot_err[self.registered]
        return float(np.median(r)) if len(r) else float("nan")

    @property
    def median_trans(self) -> float:
        r = self.trans_err[self.registered]
        return float(np.median(r)) if len(r) else float("nan")

    @property
    def fraction_under(self) -> float:
        ok = self.registered & (self.rot_err < self.delta_r) & (self.trans_err < self.delta_t)
        return float(np.mean(ok)) if len(ok) else 0.0

    def summary(self) -> dict:
        return {
            "views": len(self.registered),
            "registered": int(self.registered.sum()),
            "registration_rate": self.registration_rate,
            "median_rot_deg": self.median_rot,
            "median_trans": self.median_trans,
            "median_trans_rel_diameter": self.median_trans / self.diameter,
            "fraction_under_thresholds": self.fraction_under,
            "delta_t": self.delta_t,
            "delta_r_deg": self.delta_r,
            "diameter": self.diameter,
            "inlier_tol": self.inlier_tol,
            "alignment_inliers": self.alignment_inliers,
            "scale": self.transform.s,
        }

    def _ids(self):
        return self.view_ids if self.view_ids is not None else np.arange(len(self.registered))

    def to_text(self) -> str:
        buf = io.StringIO()
        for k, v in self.summary().items():
            buf.write(f"{k}={v!r}\n")
        buf.write("\nview_id rot_err_deg trans_err registered\n")
        for i, r, t, g in zip(self._ids(), self.rot_err, self.trans_err, self.registered):
            buf.write(f"{i} {r:.6g} {t:.6g} {int(g)}\n")
        return buf.getvalue()

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("view_id,rot_err_deg,trans_err,registered\n")
        for i, r, t, g in zip(self._ids(), self.rot_err, self.trans_err, self.registered):
            buf.write(f"{i},{r!r},{t!r},{int(g)}\n")
        return buf.getvalue()


def accuracy_report(est_poses, gt_poses, registered, delta_t=None, delta_r=5.0, diameter=None,
                    inlier_tol=None, rng_seed=0, iterations=1000, view_ids=None) -> AccuracyReport:
    """Align registered camera centres to ground truth and score every view.

    Poses are camera-to-scene (V, 3, 4).  ``diameter`` defaults to the
    bounding-box diagonal of the ground-truth camera centres; ``delta_t``
    defaults to 1% and ``inlier_tol`` to 5% of it.
    """
    est = np.asarray(est_poses, dtype=np.float64)
    gt = np.asarray(gt_poses, dtype=np.float64)
    registered = np.asarray(registered, dtype=bool)
    if est.shape != gt.shape or len(registered) != len(gt):
        raise ViewMismatch(f"estimated {est.shape}, ground truth {gt.shape}, flags {registered.shape}")
    if diameter is None:
        diameter = bbox_diameter(gt[:, :, 3])
    if delta_t is None:
        delta_t = 0.01 * diameter
    if inlier_tol is None:
        inlier_tol = 0.05 * diameter
    T, mask = ransac_similarity(est[registered, :, 3], gt[registered, :, 3], iterations, inlier_tol, rng_seed)
    aligned = T.apply_poses(est)
    rot = rotation_angle_deg(aligned[:, :, :3], gt[:, :, :3])
    trans = np.linalg.norm(aligned[:, :, 3] - gt[:, :, 3], axis=1)
    rot = np.where(registered, rot, np.nan)
    trans = np.where(registered, trans, np.nan)
    return AccuracyReport(rot, trans, registered, T, float(delta_t), float(delta_r), float(inlier_tol),
                          float(diameter), int(mask.sum()), None if view_ids is None else np.asarray(view_ids))
