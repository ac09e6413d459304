import math

import numpy as np
import pytest

from robust_mtl import trainer as TR
from robust_mtl.geometry import Intrinsics
from robust_mtl.network import ConfigError, Model, ModelConfig
from robust_mtl.tensor import Tensor

SMALL = dict(encoder_widths=(4, 6, 8, 8), decoder_widths=(2, 3, 4, 4), pose_widths=(4, 4, 6, 6))
H, W = 32, 48
K = Intrinsics(30.0, 30.0, (W - 1) / 2, (H - 1) / 2)


def pools(n=8, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 3, H, W)).astype(np.uint8)
    labels = rng.integers(0, 4, (n, H, W)).astype(np.uint8)
    frames = rng.integers(0, 256, (n, 3, 3, H, W)).astype(np.uint8)
    return images, labels, frames


def small_model(seed=0):
    return Model(ModelConfig(seed=seed, **SMALL))


# -- schedule ----------------------------------------------------------------

def test_lr_schedule_values():
    cfg = TR.TrainConfig(epochs=8)
    assert cfg.decay_epoch == 6
    assert [TR.lr_schedule(e, cfg) for e in range(8)] == [1e-4] * 6 + [1e-5] * 2


def test_lr_schedule_forty_epochs_split_thirty_ten():
    cfg = TR.TrainConfig(epochs=40)
    lrs = [TR.lr_schedule(e, cfg) for e in range(40)]
    assert lrs.count(1e-4) == 30 and lrs.count(1e-5) == 10


def test_lr_schedule_negative_epoch():
    with pytest.raises(ValueError):
        TR.lr_schedule(-1, TR.TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(lam=1.2), dict(lr=0.0), dict(epochs=0), dict(mode="joint"),
                                    dict(brightness=-0.1)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TR.TrainConfig(**kwargs)


# -- Adam --------------------------------------------------------------------

def adam_oracle(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook Adam with explicit bias correction."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_textbook_oracle():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = rng.standard_normal((12, 5))
    p = Tensor(p0.copy())
    state = TR.AdamState([p])
    for g in grads:
        TR.adam_step([p], [g], state, 1e-2)
    want = [adam_oracle(p0[i], grads[:, i], 1e-2) for i in range(5)]
    np.testing.assert_allclose(p.data, want, rtol=1e-13, atol=1e-15)
    assert state.step == 12


def test_adam_zero_gradient():
    p = Tensor(np.array([1.0, -2.0]))
    state = TR.AdamState([p])
    TR.adam_step([p], [np.zeros(2)], state, 1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_sign_sized():
    # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
    p = Tensor(np.array([0.0, 0.0]))
    state = TR.AdamState([p])
    TR.adam_step([p], [np.array([0.5, -3.0])], state, 1e-3)
    np.testing.assert_allclose(p.data, [-1e-3 * 0.5 / (0.5 + 1e-8), 1e-3 * 3.0 / (3.0 + 1e-8)], rtol=1e-14)


def test_adam_constant_gradient_limit():
    p = Tensor(np.array([0.0]))
    state = TR.AdamState([p])
    for _ in range(2000):
        before = p.data.copy()
        TR.adam_step([p], [np.array([0.02])], state, 1e-3)
    assert (before - p.data)[0] == pytest.approx(1e-3, rel=1e-6)


def test_adam_aborts_on_non_finite_gradient():
    p = Tensor(np.array([1.0]))
    state = TR.AdamState([p])
    with pytest.raises(TR.TrainingError, match="weight"):
        TR.adam_step([p], [np.array([np.nan])], state, 1e-3, names=["weight"])
    assert state.step == 0
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_skips_parameters_without_gradient():
    a, b = Tensor(np.array([1.0])), Tensor(np.array([1.0]))
    state = TR.AdamState([a, b])
    TR.adam_step([a, b], [np.array([1.0]), None], state, 0.1)
    assert a.data[0] < 1.0 and b.data[0] == 1.0


# -- batches and augmentation ------------------------------------------------

def test_photometric_targets_bypass_jitter():
    _, _, frames = pools(4)
    cfg = TR.TrainConfig(flip=False)
    b = TR.make_triplet_batch(frames, K, np.random.default_rng(0), cfg, np.float64)
    np.testing.assert_array_equal(b.targets, frames / 255.0)
    assert not np.allclose(b.inputs, frames)
    off = TR.TrainConfig(flip=False, brightness=0.0, contrast=0.0)
    b = TR.make_triplet_batch(frames, K, np.random.default_rng(0), off, np.float64)
    np.testing.assert_array_equal(b.inputs, frames.astype(np.float64))


def test_triplet_flip_is_consistent():
    _, _, frames = pools(2)
    cfg = TR.TrainConfig(brightness=0.0, contrast=0.0)
    rng = np.random.default_rng(0)
    for _ in range(8):
        b = TR.make_triplet_batch(frames, Intrinsics(30.0, 30.0, 20.0, 15.0), rng, cfg, np.float64)
        if b.intrinsics.cx != 20.0:
            assert b.intrinsics.cx == W - 1 - 20.0
            np.testing.assert_array_equal(b.targets, frames[..., ::-1] / 255.0)
            return
    pytest.fail("no flip drawn in 8 batches")


def test_seg_flip_moves_labels_with_images():
    images, labels, _ = pools(6)
    cfg = TR.TrainConfig(brightness=0.0, contrast=0.0)
    b = TR.make_seg_batch(images, labels, np.random.default_rng(1), cfg, np.float64)
    for i in range(6):
        flipped = np.array_equal(b.labels[i], labels[i, :, ::-1])
        same = np.array_equal(b.labels[i], labels[i])
        assert flipped or same
        src = images[i, :, :, ::-1] if flipped and not same else images[i]
        np.testing.assert_array_equal(b.images[i], src)


def test_color_jitter_range():
    x = np.full((3, 3, 4, 4), 128.0)
    x[:, :, 0, 0] = 250.0
    out = TR.color_jitter(x, np.random.default_rng(0), 0.2, 0.2)
    assert out.min() >= 0.0 and out.max() <= 255.0
    assert not np.array_equal(out, x)


# -- steps and loop ----------------------------------------------------------

def _step_batches(seed=0):
    images, labels, frames = pools(4, seed)
    cfg = TR.TrainConfig()
    rng = np.random.default_rng(seed)
    return (TR.make_seg_batch(images, labels, rng, cfg), TR.make_triplet_batch(frames, K, rng, cfg), cfg)


def test_train_step_reports_consistent_depth_loss():
    sb, tb, cfg = _step_batches()
    m = small_model()
    state = TR.AdamState(m.parameters())
    for _ in range(3):
        rep = TR.train_step(m, state, sb, tb, cfg, 1e-3)
        assert abs(rep.j_depth - (rep.j_ph + 1e-3 * rep.j_sm)) <= 1e-9
        assert len(rep.per_scale) == 4
        assert math.isfinite(rep.j_ce)


def test_train_step_needs_a_batch():
    m = small_model()
    with pytest.raises(TR.ContractError):
        TR.train_step(m, TR.AdamState(m.parameters()), None, None, TR.TrainConfig(), 1e-4)


def test_nan_input_aborts_with_diagnostics():
    sb, tb, cfg = _step_batches()
    sb.images[0, 0, 0, 0] = np.nan
    m = small_model()
    with pytest.raises(TR.TrainingError, match="non-finite loss"):
        TR.train_step(m, TR.AdamState(m.parameters()), sb, tb, cfg, 1e-4)


def test_train_is_deterministic(tmp_path):
    images, labels, frames = pools(8)
    cfg = TR.TrainConfig(epochs=2, seg_batch=2, depth_batch=2, max_steps=5, lam=0.3)
    outs = []
    for run in range(2):
        m = small_model()
        TR.train(m, images, labels, frames, K, cfg, log_path=tmp_path / f"log{run}.csv")
        m.save(tmp_path / f"ck{run}")
        outs.append((tmp_path / f"ck{run}" / "model.tnsr").read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "log0.csv").read_bytes() == (tmp_path / "log1.csv").read_bytes()
    lines = (tmp_path / "log0.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,j_ce,j_ph,j_sm,j_depth"
    assert len(lines) == 6


def test_lambda_one_matches_single_task_encoder():
    images, labels, frames = pools(8)
    common = dict(epochs=1, seg_batch=2, depth_batch=2, max_steps=4)
    multi, single = small_model(), small_model()
    TR.train(multi, images, labels, frames, K, TR.TrainConfig(lam=1.0, mode="multi", **common))
    TR.train(single, images, labels, frames, K, TR.TrainConfig(mode="seg", **common))
    for (name, a), (_, b) in zip(multi.named_parameters(), single.named_parameters()):
        if name.startswith(("encoder", "seg_decoder")):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    diffs = [np.abs(a - b).max() for (n, a), (_, b) in zip(multi.named_buffers(), single.named_buffers())
             if n.endswith("running_mean")]
    assert max(diffs) > 0


def test_steps_per_epoch_follow_the_labelled_pool():
    images, labels, frames = pools(8)
    m = small_model()
    res = TR.train(m, images, labels, frames[:4], K,
                   TR.TrainConfig(epochs=2, seg_batch=3, depth_batch=2, mode="multi"))
    assert res.steps == 2 * (8 // 3)
    res = TR.train(small_model(), images, labels, frames[:4], K,
                   TR.TrainConfig(epochs=1, depth_batch=2, mode="depth"))
    assert res.steps == 2


@pytest.mark.slow
def test_depth_only_error_shrinks():
    from robust_mtl import synthdata as S

    ds = S.generate(S.SceneSpec(seed=2, width=64, height=48), 60, (0.8, 0.2, 0.0))
    images, labels, frames, k = TR.load_pools(ds)
    val = ds.split("val")
    vx = np.stack([t.center for t in val])
    vd = np.stack([t.depths[1] for t in val])
    errs = []
    TR.train(Model(ModelConfig(seed=0)), images, labels, frames, k,
             TR.TrainConfig(lam=0.0, mode="depth", epochs=10),
             on_epoch_end=lambda e, m: errs.append(TR.median_depth_error(m, vx, vd)))
    smooth = np.convolve(errs, np.ones(3) / 3, "valid")
    assert np.all(np.diff(smooth) <= 0), errs
    assert errs[-1] < 0.75 * errs[0]
