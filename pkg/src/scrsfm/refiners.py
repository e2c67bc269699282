"""Pose-refinement MLP and the single-parameter focal refiner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FocalCollapse
from .geometry import RigidPose, gram_schmidt, gram_schmidt_backward
from .regressor import MLP

FOCAL_GUARD = 0.05


def default_focal(width, height) -> float:
    """70% of the image diagonal."""
    if not (width > 0 and height > 0):
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    return 0.7 * float(np.hypot(width, height))


class PoseRefiner:
    """Maps a flattened 3x4 pose to 12 additive offsets.

    Six layers of 128 channels; the activated output of layer 1 is added to
    the input of layer 3.  The last layer starts at zero so a fresh refiner
    is the identity on valid poses.
    """

    def __init__(self, rng, hidden=128, layers=6, mlp: MLP | None = None):
        if mlp is None:
            sizes = [12] + [hidden] * (layers - 1) + [12]
            mlp = MLP.create(sizes, rng, skip=(1, 3), zero_last=True)
        self.mlp = mlp

    def params(self):
        return self.mlp.params()

    def forward(self, raw_in):
        """raw_in: (V, 3, 4) poses.  Returns refined R (V,3,3), t (V,3) and a cache."""
        raw_in = np.asarray(raw_in, dtype=np.float64)
        flat = raw_in.reshape(-1, 12)
        offsets, mlp_cache = self.mlp.forward(flat, keep=True)
        raw = (flat + offsets).reshape(-1, 3, 4)
        R = gram_schmidt(raw[:, :, :3])
        return R, raw[:, :, 3].copy(), (raw, mlp_cache)

    def backward(self, cache, dR, dt):
        raw, mlp_cache = cache
        d_raw = np.zeros_like(raw)
        d_raw[:, :, :3] = gram_schmidt_backward(raw[:, :, :3], dR)
        d_raw[:, :, 3] = dt
        return self.mlp.backward(mlp_cache, d_raw.reshape(-1, 12))

    def refine(self, T_tilde: RigidPose) -> RigidPose:
        R, t, _ = self.forward(T_tilde.matrix34()[None])
        return RigidPose(R[0], t[0])


@dataclass
class FocalRefiner:
    f_init: float
    alpha: float = 0.0

    def __post_init__(self):
        if not self.f_init > 0:
            raise ValueError("f_init must be positive")

    def focal(self) -> float:
        if not 1.0 + self.alpha > FOCAL_GUARD:
            raise FocalCollapse(f"1 + alpha = {1.0 + self.alpha:.3g} <= {FOCAL_GUARD}")
        return self.f_init * (1.0 + self.alpha)

    @property
    def dfocal_dalpha(self) -> float:
        return self.f_init


def refine_pose(refiner: PoseRefiner, T_tilde: RigidPose) -> RigidPose:
    return refiner.refine(T_tilde)


def refine_focal(fr: FocalRefiner) -> float:
    return fr.focal()
