import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scrsfm.checks import grad_focal, grad_refiner
from scrsfm.errors import FocalCollapse
from scrsfm.geometry import RigidPose, is_rotation, pose_error, random_rotation
from scrsfm.refiners import FocalRefiner, PoseRefiner, default_focal, refine_focal, refine_pose
from scrsfm.regressor import AdamW


def test_default_focal():
    assert default_focal(640, 480) == pytest.approx(560.0)
    assert default_focal(300, 300) == pytest.approx(0.7 * 300 * np.sqrt(2))
    with pytest.raises(ValueError):
        default_focal(100, 0)


def test_focal_refiner():
    assert refine_focal(FocalRefiner(700.0)) == 700.0
    fr = FocalRefiner(700.0, 0.1)
    assert fr.focal() == pytest.approx(770.0)
    assert fr.dfocal_dalpha == 700.0
    with pytest.raises(FocalCollapse):
        FocalRefiner(700.0, -0.96).focal()
    with pytest.raises(ValueError):
        FocalRefiner(0.0)


def test_architecture():
    ref = PoseRefiner(np.random.default_rng(0))
    assert ref.mlp.sizes == [12, 128, 128, 128, 128, 128, 12]
    assert ref.mlp.skip == (1, 3)
    assert not ref.mlp.weights[-1].any() and not ref.mlp.biases[-1].any()


def test_fresh_refiner_is_identity():
    rng = np.random.default_rng(1)
    ref = PoseRefiner(rng)
    for _ in range(20):
        T = RigidPose(random_rotation(rng), rng.normal(size=3) * 5)
        out = refine_pose(ref, T)
        assert np.allclose(out.R, T.R, atol=1e-14) and np.array_equal(out.t, T.t)


def test_tiny_offsets_are_local():
    rng = np.random.default_rng(2)
    ref = PoseRefiner(rng)
    ref.mlp.biases[-1][:] = rng.choice([-1e-6, 1e-6], size=12)
    T = RigidPose(random_rotation(rng), rng.normal(size=3))
    out = refine_pose(ref, T)
    assert np.abs(out.R - T.R).max() < 1e-5 and np.abs(out.t - T.t).max() < 1e-5


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_refined_pose_is_rigid(seed):
    rng = np.random.default_rng(seed)
    ref = PoseRefiner(rng, hidden=32, layers=4)
    ref.mlp.weights[-1][:] = rng.normal(size=ref.mlp.weights[-1].shape) * 0.1
    R, t, _ = ref.forward(np.concatenate([random_rotation(rng), rng.normal(size=(3, 1))], 1)[None])
    assert is_rotation(R[0]) and np.linalg.det(R[0]) > 0


def test_refiner_gradient_fd():
    assert grad_refiner(100, seed=21) < 1e-4


def test_focal_gradient_fd():
    assert grad_focal(100, seed=22) < 1e-4


def test_weight_decay_pulls_to_zero():
    rng = np.random.default_rng(3)
    ref = PoseRefiner(rng, hidden=16, layers=4)
    opt = AdamW(ref.params(), lr=1e-3, weight_decay=1e-2)
    alpha = np.array([0.2])
    aopt = AdamW([alpha], lr=1e-3, weight_decay=1e-2)
    norms, alphas = [], []
    for _ in range(50):
        opt.step(ref.params(), [np.zeros_like(p) for p in ref.params()])
        aopt.step([alpha], [np.zeros(1)])
        norms.append(sum(float(np.sum(p * p)) for p in ref.params()))
        alphas.append(abs(alpha[0]))
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert all(a > b for a, b in zip(alphas, alphas[1:]))


def test_small_init_contract_on_scene_poses():
    from scrsfm.synth import generate_scene

    sc = generate_scene("room_orbit", 10, rng_seed=3)
    ref = PoseRefiner(np.random.default_rng(4))
    R, t, _ = ref.forward(sc.poses)
    for i in range(10):
        r, d = pose_error(RigidPose(R[i], t[i]), sc.pose(i))
        assert r < 0.5 and d < 0.005 * sc.diameter
