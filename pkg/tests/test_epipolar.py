import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drnnvo.dataset import (
    KITTI_00_INTRINSICS,
    CameraIntrinsics,
    SyntheticSceneConfig,
    generate_synthetic_sequence,
    true_essential,
)
from drnnvo.epipolar import (
    MsacConfig,
    decompose_E,
    denormalize,
    estimate_E_linear,
    estimate_motion,
    msac,
    normalize,
    project_to_essential,
    sampson_error,
)
from drnnvo.errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    EstimationFailed,
)
from drnnvo.geometry import Pose, angle_of, quat_exp, quat_log, rotation_error, skew
from drnnvo.matches import MatchedFeatureSet

K = KITTI_00_INTRINSICS


def scene(waypoints, n=150, sigma=0.0, rate=0.0, seed=0):
    cfg = SyntheticSceneConfig(n_points=n, pixel_noise_sigma=sigma, mismatch_rate=rate,
                               seed=seed, waypoints=waypoints)
    seq = generate_synthetic_sequence(cfg)
    m = seq.matches[0]
    return m, normalize(m.prev, K), normalize(m.curr, K), true_essential(*waypoints)


def yaw(deg):
    return quat_exp([0.0, math.radians(deg), 0.0])


def unit_frob(E):
    E = E / np.linalg.norm(E)
    i = np.argmax(np.abs(E))
    return E * np.sign(E.flat[i])


def assert_essential(E):
    s = np.linalg.svd(E, compute_uv=False)
    assert abs(np.linalg.det(E)) < 1e-6
    assert abs(s[0] - s[1]) < 1e-6 and s[2] < 1e-6
    assert abs(np.linalg.norm(E) - math.sqrt(2)) < 1e-9


# -- normalize ---------------------------------------------------------------

def test_normalize_examples():
    assert np.allclose(normalize([[K.cx, K.cy]], K), 0.0)
    k = CameraIntrinsics(100, 100, 64, 48)
    assert normalize([[164.0, 48.0]], k)[0, 0] == 1.0


@given(st.lists(st.tuples(st.floats(-1e3, 1e4), st.floats(-1e3, 1e4)), min_size=1, max_size=20))
def test_normalize_denormalize_inverse(pts):
    p = np.array(pts)
    assert np.allclose(denormalize(normalize(p, K), K), p, rtol=1e-12, atol=1e-9)


# -- sampson -------------------------------------------------------------------

def test_sampson_exact_pair_zero():
    m, x1, x2, E = scene([Pose(), Pose([0.2, 0, 1], yaw(3))])
    assert sampson_error(E, x1, x2).max() < 1e-12


def test_sampson_epipolar_plane():
    E = skew([1.0, 0.0, 0.0])
    x1 = np.array([[0.2, 0.3], [-0.4, -0.1]])
    x2 = np.array([[0.5, 0.3], [0.7, -0.1]])
    assert np.allclose(sampson_error(E, x1, x2), 0.0, atol=1e-15)


def test_sampson_matches_first_order_oracle():
    # oracle: |r| / ||grad r|| with the gradient taken by central differences
    rng = np.random.default_rng(1)
    E = project_to_essential(rng.normal(size=(3, 3)))
    x = rng.uniform(-0.5, 0.5, (20, 4))

    def r(v):
        return np.array([v[0], v[1], 1.0]) @ E @ np.array([v[2], v[3], 1.0])

    h = 1e-6
    for v in x:
        g = np.array([(r(v + h * e) - r(v - h * e)) / (2 * h) for e in np.eye(4)])
        want = abs(r(v)) / np.linalg.norm(g)
        got = sampson_error(E, v[None, :2], v[None, 2:])[0]
        assert abs(got - want) < 1e-8 * max(1.0, want)


# -- linear solver -------------------------------------------------------------

@pytest.mark.parametrize("wp", [
    [Pose(), Pose([0, 0, 1])],
    [Pose(), Pose([0.3, -0.1, 1], yaw(4))],
    [Pose([1, 2, 3], yaw(10)), Pose([1.5, 2, 4], yaw(-5))],
])
def test_linear_recovers_true_E(wp):
    _, x1, x2, E_true = scene(wp)
    E = estimate_E_linear(x1, x2)
    assert np.linalg.norm(unit_frob(E) - unit_frob(E_true)) < 1e-8
    assert_essential(E)


def test_duplicated_point_is_degenerate():
    x = np.tile([[0.1, 0.2]], (8, 1))
    with pytest.raises(DegenerateConfiguration):
        estimate_E_linear(x, x + 0.01)


def test_linear_needs_eight():
    with pytest.raises(ValueError):
        estimate_E_linear(np.zeros((7, 2)), np.zeros((7, 2)))


@given(st.integers(0, 10_000))
def test_linear_output_is_essential(seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.uniform(-1, 1, (12, 2)), rng.uniform(-1, 1, (12, 2))
    try:
        E = estimate_E_linear(x1, x2)
    except DegenerateConfiguration:
        return
    assert_essential(E)


# -- msac ------------------------------------------------------------------------

def test_msac_clean_noiseless():
    _, x1, x2, _ = scene([Pose(), Pose([0.1, 0, 1], yaw(2))])
    res = msac(x1, x2)
    assert res.inliers.all() and res.cost < 1e-20
    assert res.iterations >= 1
    assert_essential(res.E)


def test_msac_needs_eight():
    with pytest.raises(ValueError):
        msac(np.zeros((7, 2)), np.zeros((7, 2)))


def test_msac_rejects_corrupted_pairs():
    m, x1, x2, _ = scene([Pose(), Pose([0.1, 0, 1], yaw(2))], n=300, sigma=0.5, rate=0.3, seed=2)
    res = msac(x1, x2)
    excluded = np.count_nonzero(m.corrupted & ~res.inliers) / np.count_nonzero(m.corrupted)
    assert excluded >= 0.95
    th = MsacConfig().sampson_threshold
    assert sampson_error(res.E, x1[res.inliers], x2[res.inliers]).max() <= th


def test_msac_keeps_every_clean_pair_when_noiseless():
    m, x1, x2, _ = scene([Pose(), Pose([0, 0.1, 1], yaw(-3))], n=300, rate=0.3, seed=3)
    res = msac(x1, x2)
    assert np.count_nonzero(~m.corrupted & ~res.inliers) == 0


def test_msac_deterministic():
    _, x1, x2, _ = scene([Pose(), Pose([0, 0, 1], yaw(1))], sigma=0.5, rate=0.2, seed=4)
    a, b = msac(x1, x2, MsacConfig(seed=7)), msac(x1, x2, MsacConfig(seed=7))
    assert np.array_equal(a.E, b.E) and np.array_equal(a.inliers, b.inliers)
    assert a.iterations == b.iterations


@pytest.mark.parametrize("kw", [dict(sampson_threshold=0), dict(confidence=1.0),
                                dict(confidence=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MsacConfig(**kw)


# -- decomposition -----------------------------------------------------------------

def test_forward_motion_decomposition():
    _, x1, x2, E = scene([Pose(), Pose([0, 0, 1])])
    inc = decompose_E(E, x1, x2)
    assert math.degrees(np.linalg.norm(quat_log(inc.dq))) < 0.01
    assert math.degrees(math.acos(min(1.0, inc.dp @ [0, 0, 1]))) < 0.01
    assert not inc.scaled and abs(np.linalg.norm(inc.dp) - 1) < 1e-12


def test_yaw_turn_decomposition():
    _, x1, x2, _ = scene([Pose(), Pose([0, 0, 1], yaw(5))])
    inc = decompose_E(estimate_E_linear(x1, x2), x1, x2)
    assert abs(math.degrees(np.linalg.norm(quat_log(inc.dq))) - 5.0) < 0.05


@pytest.mark.parametrize("wp", [
    [Pose(), Pose([0.5, 0.2, 1], yaw(7))],
    [Pose([3, 0, 1], yaw(30)), Pose([3.2, 0.1, 0.4], yaw(25))],
])
def test_decomposition_matches_ground_truth(wp):
    _, x1, x2, E = scene(wp)
    inc = decompose_E(E, x1, x2)
    a, b = wp
    dq_true = a.q.inverse() @ b.q
    dp_true = b.R.T @ (b.p - a.p)
    assert angle_of(rotation_error(dq_true, inc.dq)) < 1e-6
    assert np.allclose(inc.dp, dp_true / np.linalg.norm(dp_true), atol=1e-8)


def test_sign_invariance():
    _, x1, x2, E = scene([Pose(), Pose([0.3, 0, 1], yaw(-4))])
    a, b = decompose_E(E, x1, x2), decompose_E(-E, x1, x2)
    assert np.allclose(a.dp, b.dp) and np.allclose(a.dq.as_array(), b.dq.as_array())


def test_pure_rotation_flagged():
    m, x1, x2, _ = scene([Pose(), Pose([0, 0, 0], yaw(3))])
    with pytest.raises((CheiralityAmbiguous, DegenerateConfiguration, EstimationFailed)):
        decompose_E(estimate_E_linear(x1, x2), x1, x2)
    with pytest.raises((CheiralityAmbiguous, DegenerateConfiguration, EstimationFailed)):
        estimate_motion(m, K)


def test_decompose_needs_points():
    with pytest.raises(ValueError):
        decompose_E(skew([0, 0, 1]), np.zeros((0, 2)), np.zeros((0, 2)))


# -- estimate_motion ---------------------------------------------------------------

def test_noiseless_sequence_rotation_error(noiseless_seq):
    seq = noiseless_seq
    for k, m in enumerate(seq.matches, 1):
        est = estimate_motion(m, seq.intrinsics)
        dq = seq.gt_poses[k - 1].q.inverse() @ seq.gt_poses[k].q
        assert angle_of(rotation_error(dq, est.increment.dq)) < 0.02
        assert est.msac.n_inliers == len(m)


def test_estimate_motion_deterministic(noisy_seq):
    m = noisy_seq.matches[0]
    a, b = estimate_motion(m, K), estimate_motion(m, K)
    assert np.array_equal(a.increment.dp, b.increment.dp) and a.increment.dq == b.increment.dq


def test_all_corrupted_fails():
    rng = np.random.default_rng(0)
    m = MatchedFeatureSet(rng.uniform(0, 1200, (40, 2)), rng.uniform(0, 1200, (40, 2)), (0, 1))
    with pytest.raises(EstimationFailed):
        estimate_motion(m, K)


def test_too_few_matches_fails():
    m, *_ = scene([Pose(), Pose([0, 0, 1])], n=20)
    with pytest.raises(EstimationFailed):
        estimate_motion(m.subset(np.arange(len(m)) < 10), K)


def test_near_static_flag():
    m, *_ = scene([Pose(), Pose([0, 0, 0.001])], n=100)
    est = estimate_motion(m, K)
    assert est.near_static and est.msac is None
    assert est.increment.dq == est.increment.dq.identity()
