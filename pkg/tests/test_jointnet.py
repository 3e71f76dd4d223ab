import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robocascade.jointnet import (
    JointNetConfig,
    Normalization,
    build_jointnet,
    joint_error,
    joint_errors,
    joint_loss,
    joint_loss_grad,
    load_jointnet,
    overlay,
    predict_joints,
    select_points,
    train_jointnet,
)
from robocascade.neuralcore import save_checkpoint

coords = st.floats(-5, 5, allow_nan=False)


def points(k=4):
    return arrays(np.float64, (k, 3), elements=coords)


# --- overlay ---------------------------------------------------------------

def test_overlay_examples():
    rng = np.random.default_rng(0)
    c = rng.random((5, 6, 3))
    np.testing.assert_array_equal(overlay(c, np.ones((5, 6), np.uint8)), c)
    assert np.all(overlay(c, np.zeros((5, 6), np.uint8)) == 0)
    with pytest.raises(ValueError):
        overlay(c, np.ones((5, 5)))


@given(arrays(np.float32, (4, 5, 3), elements=st.floats(0, 1, width=32)),
       arrays(np.uint8, (4, 5), elements=st.integers(0, 1)))
def test_overlay_idempotent(c, m):
    once = overlay(c, m)
    np.testing.assert_array_equal(overlay(once, m), once)
    assert np.all(once[m == 0] == 0)


# --- loss and error --------------------------------------------------------

def test_joint_loss_examples():
    gt = np.zeros((1, 3))
    assert joint_loss(np.array([[0.03, 0.0, 0.04]]), gt) == pytest.approx(0.05, abs=1e-9)
    gt2 = np.zeros((2, 3))
    assert joint_loss(np.array([[0.02, 0, 0], [0, 0.04, 0]]), gt2) == pytest.approx(0.03, abs=1e-12)
    mean, per = joint_error(gt2, gt2)
    assert mean == 0.0 and np.all(per == 0)
    with pytest.raises(ValueError):
        joint_loss(np.zeros((2, 3)), np.zeros((3, 3)))


@given(points(), points())
def test_joint_loss_is_metric_mean(a, b):
    assert joint_loss(a, b) >= 0
    assert joint_loss(a, b) == joint_loss(b, a)
    assert joint_loss(a, a) == 0


@given(points(), arrays(np.float64, (3,), elements=coords))
def test_translation_gives_vector_norm(gt, v):
    _, per = joint_error(gt + v, gt)
    np.testing.assert_allclose(per, np.linalg.norm(v), atol=1e-9)


@given(arrays(np.float64, (2, 3, 3), elements=coords), arrays(np.float64, (2, 3, 3), elements=coords))
def test_joint_loss_grad_finite_differences(est, gt):
    est = est + 0.5 * (np.abs(est - gt).max(axis=-1, keepdims=True) < 1e-3)  # keep off the norm's kink
    g = joint_loss_grad(est, gt)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 1), (0, 1, 2)]:
        up, dn = est.copy(), est.copy()
        up[idx] += h
        dn[idx] -= h
        num = (joint_errors(up, gt).mean() - joint_errors(dn, gt).mean()) / (2 * h)
        assert abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8) < 1e-4


def test_joint_loss_grad_zero_at_coincidence():
    assert np.all(joint_loss_grad(np.ones((1, 2, 3)), np.ones((1, 2, 3))) == 0)


# --- normalization and point selection -------------------------------------

@given(arrays(np.float64, (6, 4, 3), elements=coords))
def test_normalization_round_trip(j):
    norm = Normalization.fit(j)
    np.testing.assert_allclose(norm.decode(norm.encode(j)), j, atol=1e-9)
    again = Normalization.from_dict(norm.to_dict())
    np.testing.assert_array_equal(again.mean, norm.mean)
    assert np.all(norm.scale > 0)


def test_select_points():
    j = np.arange(2 * 7 * 3.0).reshape(2, 7, 3)
    assert select_points(j, 7).shape == (2, 7, 3)
    np.testing.assert_array_equal(select_points(j, 6), j[:, :6])
    with pytest.raises(ValueError):
        select_points(j, 8)


# --- network ---------------------------------------------------------------

def test_architecture():
    cfg = JointNetConfig()
    net = build_jointnet(cfg)
    kinds = [s["kind"] for s in net.specs()]
    assert kinds == ["conv2d", "relu", "maxpool2d", "conv2d", "relu", "maxpool2d", "conv2d", "relu", "dense"]
    convs = [s for s in net.specs() if s["kind"] == "conv2d"]
    assert [c["out_channels"] for c in convs] == [32, 64, 128]
    assert [c["dilation"] for c in convs] == [1, 2, 4]
    assert net.output_shape == (21,)


def test_profiles():
    full = JointNetConfig.profile("full")
    assert (full.batch_size, full.epochs, full.width, full.height) == (128, 5000, 256, 212)
    lr, mu = full.lr_schedule(), full.momentum_schedule()
    assert lr.value(0) == 0.03 and lr.value(4999) == 1e-4
    assert mu.value(0) == 0.9 and mu.value(4999) == 0.999


def test_predict_shape_and_finite():
    cfg = JointNetConfig(width=16, height=12, n_points=5)
    net = build_jointnet(cfg, seed=0)
    norm = Normalization(np.zeros(3), np.ones(3))
    img = np.random.default_rng(0).random((12, 16, 3))
    p = predict_joints(net, norm, img)
    assert p.shape == (5, 3) and np.all(np.isfinite(p))
    batch = predict_joints(net, norm, np.stack([img, img * 0.5]))
    assert batch.shape == (2, 5, 3)
    assert batch[0].tobytes() == p.tobytes()
    assert predict_joints(net, norm, img).tobytes() == p.tobytes()
    with pytest.raises(ValueError):
        predict_joints(net, norm, np.zeros((10, 16, 3)))


def _toy_joints(n=16, h=12, w=16, seed=0):
    """A bright square whose position encodes the target point."""
    rng = np.random.default_rng(seed)
    imgs = np.zeros((n, h, w, 3), np.float32)
    joints = np.zeros((n, 2, 3))
    for i in range(n):
        r, c = rng.integers(0, h - 3), rng.integers(0, w - 3)
        imgs[i, r:r + 3, c:c + 3] = 0.8
        joints[i, 0] = (c * 0.1, r * 0.1, 2.0)
        joints[i, 1] = (c * 0.1 + 0.2, r * 0.1, 2.1)
    return imgs, joints


def test_training_deterministic_learns_and_schedules():
    imgs, joints = _toy_joints()
    cfg = JointNetConfig(width=16, height=12, filters=(4, 8, 8), n_points=2, epochs=30, batch_size=4)
    a = train_jointnet(imgs, joints, cfg, seed=2)
    b = train_jointnet(imgs, joints, cfg, seed=2)
    assert a.curve == b.curve
    assert a.curve[0][2] == 0.03 and a.curve[-1][2] == 1e-4
    assert a.curve[0][3] == 0.9 and a.curve[-1][3] == 0.999
    # beats predicting the mean point on the training data
    centroid = joints.mean(axis=0)
    base = joint_errors(np.broadcast_to(centroid, joints.shape), joints).mean()
    pred = predict_joints(a.net, a.norm, imgs)
    assert joint_errors(pred, joints).mean() < 0.85 * base


def test_training_errors():
    cfg = JointNetConfig(width=16, height=12, filters=(4, 4, 4), n_points=2, epochs=1)
    with pytest.raises(ValueError):
        train_jointnet(np.zeros((0, 12, 16, 3)), np.zeros((0, 2, 3)), cfg)
    with pytest.raises(ValueError):
        train_jointnet(np.zeros((2, 8, 16, 3)), np.zeros((2, 2, 3)), cfg)


def test_checkpoint_with_normalization(tmp_path):
    cfg = JointNetConfig(width=16, height=12, n_points=3)
    net = build_jointnet(cfg, seed=1)
    norm = Normalization(np.array([0.1, -0.2, 3.0]), np.array([0.5, 0.4, 0.3]))
    save_checkpoint(net, tmp_path / "j", {"model": "jointnet", "normalization": norm.to_dict()})
    again, norm2, meta = load_jointnet(tmp_path / "j")
    img = np.random.default_rng(0).random((12, 16, 3))
    assert predict_joints(again, norm2, img).tobytes() == predict_joints(net, norm, img).tobytes()
    save_checkpoint(net, tmp_path / "m", {"model": "masknet"})
    with pytest.raises(ValueError):
        load_jointnet(tmp_path / "m")
