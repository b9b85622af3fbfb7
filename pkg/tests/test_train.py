import numpy as np
import pytest

from conftest import toy_pairs
from draco_dehaze import losses
from draco_dehaze.blocks import ArchConfig, draco_forward, init_weights
from draco_dehaze.tensor import ConfigurationError, DimensionError, Tensor, no_grad
from draco_dehaze.train import (
    MAGIC,
    AdamState,
    Checkpoint,
    CheckpointFormatError,
    NumericError,
    TrainConfig,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    fit,
    load_checkpoint,
    sample_crops,
    save_checkpoint,
    train_step,
)

TINY = ArchConfig(base_channels=8, attention_channels=24, n_ddirb=1, n_attdrn=1)


def _tiny_config(**kw):
    base = dict(lr=1e-3, epochs=3, batch=2, crop=8, seed=0, arch=TINY)
    base.update(kw)
    return TrainConfig(**base)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

def test_adam_first_step():
    p = {"w": np.zeros((2, 2), dtype=np.float32)}
    state = adam_step(p, {"w": np.ones((2, 2), dtype=np.float32)}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=1e-6)
    assert state.step == 1
    np.testing.assert_allclose(state.m["w"], 0.1)
    np.testing.assert_allclose(state.v["w"], 0.001)


def test_adam_zero_grad_is_noop():
    p = {"w": np.full((3,), 0.7, dtype=np.float32)}
    adam_step(p, {"w": np.zeros(3, dtype=np.float32)}, AdamState())
    np.testing.assert_array_equal(p["w"], np.float32(0.7))


def test_adam_quadratic_sanity():
    theta = {"t": np.array([1.0])}
    state = AdamState()
    for _ in range(5000):
        adam_step(theta, {"t": theta["t"].copy()}, state, lr=1e-3)
    assert abs(theta["t"][0]) < 0.01


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())
    with pytest.raises(ConfigurationError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, AdamState(step=-1))


def test_adam_deterministic(rng):
    grads = [rng.standard_normal(5) for _ in range(10)]
    out = []
    for _ in range(2):
        p, s = {"w": np.zeros(5, dtype=np.float32)}, AdamState()
        for g in grads:
            adam_step(p, {"w": g.astype(np.float32)}, s)
        out.append(p["w"].copy())
    assert np.array_equal(out[0], out[1])


# ----------------------------------------------------------------------------
# crops
# ----------------------------------------------------------------------------

def test_crop_full_size_equals_original(rng):
    pairs = toy_pairs(2, 12)
    b = sample_crops(pairs, 12, 2, rng, indices=[1, 0])
    np.testing.assert_array_equal(b.hazy[0], pairs[1][0])
    np.testing.assert_array_equal(b.clear[1], pairs[0][1])


def test_crops_aligned(rng):
    # identical content in both members makes misalignment visible
    imgs = [rng.uniform(0, 1, (3, 20, 17)).astype(np.float32) for _ in range(3)]
    pairs = [(im, im.copy()) for im in imgs]
    for _ in range(200):
        b = sample_crops(pairs, 8, 4, rng)
        np.testing.assert_array_equal(b.hazy, b.clear)
        for img_i, (y, x), crop in zip(b.indices, b.offsets, b.hazy):
            np.testing.assert_array_equal(crop, imgs[img_i][:, y:y + 8, x:x + 8])


def test_crop_offsets_cover_range(rng):
    pairs = [(np.zeros((3, 10, 10), np.float32),) * 2]
    offsets = set()
    for _ in range(300):
        offsets.update(sample_crops(pairs, 8, 1, rng).offsets)
    assert offsets == {(y, x) for y in range(3) for x in range(3)}


def test_crops_seeded():
    pairs = toy_pairs(3, 16)
    a = sample_crops(pairs, 8, 4, np.random.default_rng(5))
    b = sample_crops(pairs, 8, 4, np.random.default_rng(5))
    assert a.offsets == b.offsets and a.indices == b.indices


def test_crop_too_small(rng):
    pairs = toy_pairs(1, 8) + toy_pairs(1, 16)
    with pytest.raises(DimensionError):
        sample_crops(pairs, 12, 2, rng, indices=[0, 1])
    b = sample_crops(pairs, 12, 2, rng, indices=[0, 1], strict=False)
    assert b.indices == [1]
    with pytest.raises(DimensionError):
        sample_crops(pairs[:1], 12, 1, rng, strict=False)


# ----------------------------------------------------------------------------
# config
# ----------------------------------------------------------------------------

def test_train_config_validation_and_round_trip():
    cfg = _tiny_config(loss_mode="triplet")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(batch=0), dict(crop=10), dict(loss_mode="l2"), dict(lr=0)):
        with pytest.raises(ConfigurationError):
            _tiny_config(**bad)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1})


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.epochs, cfg.batch, cfg.crop) == (0.001, 200, 16, 64)
    assert (cfg.beta1, cfg.beta2, cfg.eps_adam) == (0.9, 0.999, 1e-8)
    assert cfg.train_extractor


# ----------------------------------------------------------------------------
# train step
# ----------------------------------------------------------------------------

def test_train_step_reports_components(rng):
    pairs = toy_pairs(2, 8)
    w = init_weights(TINY, 0)
    b = sample_crops(pairs, 8, 2, rng)
    r = train_step(b.hazy, b.clear, w, AdamState(), _tiny_config())
    assert r.step == 1
    assert all(np.isfinite(v) for v in (r.mae, r.ssim_loss, r.contrastive, r.total))
    assert r.total == pytest.approx(r.mae + r.ssim_loss + 0.1 * r.contrastive, rel=1e-5)


def test_joint_trainability(rng):
    w = init_weights(TINY, 0)
    hazy = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    clear = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    before = {n: w[n].data.copy() for n in w.names()}
    train_step(hazy, clear, w, AdamState(), _tiny_config())
    net = [n for n in w.names(include_extractor=False)]
    ext = w.extractor_names()
    assert sum(np.linalg.norm(w[n].grad) for n in net) > 0
    assert sum(np.linalg.norm(w[n].grad) for n in ext) > 0
    assert any(not np.array_equal(before[n], w[n].data) for n in ext)


def test_frozen_extractor(rng):
    w = init_weights(TINY, 0)
    hazy = rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
    clear = rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
    before = {n: w[n].data.copy() for n in w.extractor_names()}
    train_step(hazy, clear, w, AdamState(), _tiny_config(train_extractor=False))
    for n, arr in before.items():
        np.testing.assert_array_equal(w[n].data, arr)


def test_no_contrastive_never_calls_extractor(monkeypatch):
    calls = {"n": 0}
    real = losses.feature_extractor

    def counting(*a, **k):
        calls["n"] += 1
        return real(*a, **k)

    monkeypatch.setattr(losses, "feature_extractor", counting)
    fit(toy_pairs(2, 8), _tiny_config(loss_mode="no-contrastive", epochs=2))
    assert calls["n"] == 0
    fit(toy_pairs(2, 8), _tiny_config(loss_mode="quadruplet", epochs=1))
    assert calls["n"] == 4  # J, J', GT, I once each


def test_non_finite_loss_aborts():
    w = init_weights(TINY, 0)
    w["ddirb_stage.tail.b"].data[:] = np.nan
    x = np.zeros((1, 3, 8, 8), np.float32)
    with pytest.raises(NumericError, match="step 1"):
        train_step(x, x, w, AdamState(), _tiny_config())


def test_train_step_shape_check():
    w = init_weights(TINY, 0)
    with pytest.raises(DimensionError):
        train_step(np.zeros((1, 3, 8, 8)), np.zeros((1, 3, 8, 4)), w, AdamState(), _tiny_config())


def test_loss_decreases_on_toy_set():
    pairs = toy_pairs(2, 16, seed=0)
    cfg = TrainConfig(crop=16, batch=2, epochs=50, seed=0)
    result = fit(pairs, cfg)
    assert result.state.step == 50
    assert result.history[-1]["total"] < result.history[0]["total"]


def test_fit_history_and_max_steps():
    seen = []
    r = fit(toy_pairs(3, 8), _tiny_config(epochs=5, max_steps=7), on_epoch=seen.append)
    # 3 pairs at batch 2 is 2 steps per epoch
    assert r.state.step == 7
    assert [h["step"] for h in r.history] == [2, 4, 6, 7]
    assert seen == r.history
    assert set(r.history[0]) == {"epoch", "step", "mae", "ssim_loss", "contrastive", "total"}
    with pytest.raises(ValueError):
        fit([], _tiny_config())


def _trained(seed=0, **kw):
    return fit(toy_pairs(2, 8), _tiny_config(seed=seed, **kw))


def test_training_deterministic():
    a, b = _trained(), _trained()
    assert encode_checkpoint(Checkpoint(a.weights, a.state, 0)) == \
        encode_checkpoint(Checkpoint(b.weights, b.state, 0))
    c = _trained(seed=1)
    assert not np.array_equal(a.weights["ddirb0.sub0.expand.w"].data,
                              c.weights["ddirb0.sub0.expand.w"].data)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    r = _trained()
    ckpt = Checkpoint(r.weights, r.state, 0)
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.state.step == r.state.step and loaded.config == TINY
    for n in r.weights.names():
        np.testing.assert_array_equal(loaded.state.m[n], r.state.m[n])
    x = Tensor(rng.uniform(0, 1, (1, 3, 9, 11)))
    with no_grad():
        before = draco_forward(x, r.weights)[1].data
        after = draco_forward(x, loaded.weights)[1].data
    assert np.array_equal(before, after)
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_checkpoint_layout_prefix():
    raw = encode_checkpoint(Checkpoint(init_weights(TINY, 0), AdamState(), 3))
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1
    n_tensors = int.from_bytes(raw[8:12], "little")
    assert n_tensors == len(init_weights(TINY).params)
    name_len = int.from_bytes(raw[12:16], "little")
    assert raw[16:16 + name_len] == b"ddirb_stage.head.w"
    assert raw[16 + name_len] == 4  # ndim


def test_checkpoint_errors(tmp_path):
    raw = encode_checkpoint(Checkpoint(init_weights(TINY, 0), AdamState(), 0))
    with pytest.raises(CheckpointFormatError, match="offset 0"):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="version"):
        decode_checkpoint(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    for cut in (3, 10, 100, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointFormatError, match="offset"):
            decode_checkpoint(raw[:cut])
    with pytest.raises(CheckpointFormatError, match="trailing"):
        decode_checkpoint(raw + b"\x00")


def test_truncated_file_leaves_nothing_loaded(tmp_path):
    r = _trained()
    save_checkpoint(tmp_path / "a.ckpt", Checkpoint(r.weights, r.state, 0))
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(data[:-20])
    result = None
    with pytest.raises(CheckpointFormatError):
        result = load_checkpoint(tmp_path / "a.ckpt")
    assert result is None


def test_checkpoint_name_mismatch():
    w = init_weights(TINY, 0)
    other = init_weights(TINY.with_blocks("ddirb"), 0)
    from draco_dehaze.blocks import DracoWeights
    mixed = Checkpoint(DracoWeights(TINY, other.params), AdamState(), 0)
    with pytest.raises(CheckpointFormatError, match="do not match"):
        decode_checkpoint(encode_checkpoint(mixed))
    assert decode_checkpoint(encode_checkpoint(Checkpoint(w, AdamState(), 0))).state.m == {}
