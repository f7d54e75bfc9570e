import logging
import struct

import numpy as np
import pytest

from cmsoftmax.data import Dataset, synth_blobs
from cmsoftmax.errors import DimensionError, DivergenceError, FormatError, UnsupportedVersionError
from cmsoftmax.losses import LossSpec, contract, contraction_gap
from cmsoftmax.rng import Xoshiro256
from cmsoftmax.training import (
    BackboneConfig,
    Model,
    OptimizerConfig,
    TrainState,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

MLP = BackboneConfig("mlp", hidden=(16,))
QUICK = OptimizerConfig(learning_rate=0.05, epochs=2, batch_size=16, decay_epochs=(), seed=3)


@pytest.fixture(autouse=True)
def _quiet():
    logging.disable(logging.INFO)
    yield
    logging.disable(logging.NOTSET)


def params_bytes(state):
    return {k: p.value.tobytes() for k, p in state.parameters.items()}


def small_images(n=40, classes=3, seed=0):
    rng = Xoshiro256(seed)
    labels = np.array([i % classes for i in range(n)])
    images = rng.uniform_array((n, 1, 8, 8), 0.0, 0.2)
    for i, y in enumerate(labels):
        images[i, 0, 2 * y : 2 * y + 2, :] += 0.8
    return Dataset(images, labels, classes)


class TestConfigs:
    def test_schedule(self):
        opt = OptimizerConfig(learning_rate=0.05, decay_epochs=(12, 17), decay_factor=0.1)
        assert opt.lr_at(0) == 0.05
        assert opt.lr_at(12) == pytest.approx(0.005)
        assert opt.lr_at(19) == pytest.approx(0.0005)

    @pytest.mark.parametrize("kwargs", [{"momentum": 1.0}, {"learning_rate": -1.0}, {"weight_decay": -1e-4}])
    def test_invalid_optimizer(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)

    def test_feature_dim_at_least_two(self):
        with pytest.raises(ValueError):
            BackboneConfig(feature_dim=1)

    def test_parameter_names(self):
        model = Model.build(BackboneConfig(channels=(4, 8)), (1, 8, 8), 10, Xoshiro256(0))
        assert list(model.params) == [
            "conv1.W", "conv1.b", "conv2.W", "conv2.b", "feature.W", "feature.b", "head.W",
        ]
        assert model.params["feature.W"].value.shape == (8 * 2 * 2, 2)

    def test_init_bound(self):
        model = Model.build(MLP, (1, 1, 4), 3, Xoshiro256(0))
        w = model.params["fc1.W"].value
        assert np.abs(w).max() <= np.sqrt(6 / 4)
        assert not model.params["fc1.b"].value.any()

    def test_too_small_for_cnn(self):
        with pytest.raises(DimensionError):
            Model.build(BackboneConfig(), (1, 4, 4), 10, Xoshiro256(0))


class TestTrain:
    def test_separable_one_epoch(self):
        ds = synth_blobs(2, 2, 50, 0.0, 0.0, 0.0, seed=0, radius=1.0)
        state = train(ds, MLP, LossSpec("softmax"), OptimizerConfig(epochs=1, batch_size=10, decay_epochs=()))
        accuracy, _ = evaluate(state, ds)
        assert accuracy == 1.0

    def test_zero_learning_rate_is_a_no_op(self):
        ds = synth_blobs(3, 2, 20, 0.1, 0.5, 0.2, seed=1)
        opt = OptimizerConfig(learning_rate=0.0, epochs=2, batch_size=8, seed=5)
        before = Model.build(MLP, ds.sample_shape, 3, Xoshiro256(5))
        after = train(ds, MLP, LossSpec("cm_softmax"), opt)
        assert params_bytes(after) == {k: p.value.tobytes() for k, p in before.params.items()}

    @pytest.mark.parametrize("kind", ["softmax", "cm_margin"])
    def test_same_seed_bitwise(self, kind):
        ds = synth_blobs(3, 2, 20, 0.1, 0.5, 0.2, seed=2)
        a = train(ds, MLP, LossSpec(kind), QUICK)
        b = train(ds, MLP, LossSpec(kind), QUICK)
        assert params_bytes(a) == params_bytes(b)
        assert a.loss_history == b.loss_history
        assert a.rng_state == b.rng_state

    def test_different_seed_differs(self):
        ds = synth_blobs(3, 2, 20, 0.1, 0.5, 0.2, seed=2)
        a = train(ds, MLP, LossSpec("softmax"), QUICK)
        b = train(ds, MLP, LossSpec("softmax"), OptimizerConfig(epochs=2, batch_size=16, decay_epochs=(), seed=4))
        assert params_bytes(a) != params_bytes(b)

    def test_cnn_learns_and_is_deterministic(self):
        ds = small_images()
        backbone = BackboneConfig("cnn", channels=(4,), feature_dim=3)
        opt = OptimizerConfig(learning_rate=0.05, epochs=6, batch_size=8, decay_epochs=(), seed=1)
        a = train(ds, backbone, LossSpec("softmax"), opt)
        b = train(ds, backbone, LossSpec("softmax"), opt)
        assert params_bytes(a) == params_bytes(b)
        assert a.loss_history[-1] < a.loss_history[0]
        assert all(np.isfinite(a.loss_history))

    def test_divergence_names_batch(self):
        ds = synth_blobs(4, 2, 50, 0.05, 0.5, 0.2, seed=1)
        opt = OptimizerConfig(learning_rate=1e6, epochs=3, batch_size=16, decay_epochs=())
        with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
            train(ds, MLP, LossSpec("softmax"), opt)
        assert info.value.batch_index >= 0
        assert f"batch {info.value.batch_index}" in str(info.value)

    def test_nan_input_diverges_on_first_batch(self):
        ds = synth_blobs(2, 2, 8, 0.05, 0.5, 0.2, seed=1)
        ds.images[:] = np.nan
        with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
            train(ds, MLP, LossSpec("softmax"), QUICK)
        assert info.value.batch_index == 0

    def test_contracted_norms_stay_in_range(self):
        ds = synth_blobs(4, 4, 40, 0.05, 0.5, 0.2, seed=3)
        spec = LossSpec("cm_softmax", p=0.9, gamma=1.0)
        bounds = spec.contraction(4)
        seen = []

        def check(state):
            feats = state.model.features(ds.images).value
            norms = np.linalg.norm(feats, axis=1)
            f = contract(norms, bounds)
            seen.append(norms.max())
            assert np.all(f >= bounds.s_lower)
            assert np.all(f <= bounds.s_upper)
            assert np.all(contraction_gap(norms, bounds) > 0)

        train(ds, MLP, spec, OptimizerConfig(epochs=4, batch_size=16, decay_epochs=()), on_epoch=check)
        assert len(seen) == 4

    def test_history_is_finite_and_decreasing_on_easy_data(self):
        ds = synth_blobs(3, 3, 40, 0.05, 0.2, 0.2, seed=4)
        state = train(ds, MLP, LossSpec("fixed_norm"), OptimizerConfig(epochs=5, batch_size=16, decay_epochs=()))
        assert len(state.loss_history) == 5 and state.epoch == 5
        assert state.loss_history[-1] < state.loss_history[0]


class TestEvaluate:
    def test_record_count_and_fields(self):
        ds = synth_blobs(3, 2, 10, 0.1, 0.5, 0.2, seed=5)
        state = train(ds, MLP, LossSpec("cm_softmax"), QUICK)
        accuracy, records = evaluate(state, ds)
        assert len(records) == len(ds)
        assert [r.index for r in records] == list(range(len(ds)))
        assert accuracy == pytest.approx(np.mean([r.correct for r in records]))
        for r in records:
            assert abs(r.norm - np.linalg.norm(r.feature)) < 1e-9
            assert r.correct == (r.prediction == r.label)
            assert 0.0 <= r.prob <= 1.0

    def test_chance_level(self):
        rng = Xoshiro256(7)
        n = 1000
        images = rng.uniform_array((n, 1, 1, 6), -1.0, 1.0)
        labels = np.array([rng.below(10) for _ in range(n)])
        model = Model.build(BackboneConfig("mlp", hidden=(8,)), (1, 1, 6), 10, Xoshiro256(8))
        state = TrainState(model, LossSpec("softmax"), OptimizerConfig())
        accuracy, _ = evaluate(state, Dataset(images, labels, 10))
        assert abs(accuracy - 0.1) <= 0.03

    def test_margin_is_dropped_at_evaluation(self):
        ds = synth_blobs(3, 2, 10, 0.1, 0.5, 0.2, seed=5)
        state = train(ds, MLP, LossSpec("cm_margin", m=0.5), QUICK)
        _, with_margin = evaluate(state, ds)
        state.loss_spec = LossSpec("cm_softmax")
        _, without = evaluate(state, ds)
        assert [r.prob for r in with_margin] == [r.prob for r in without]

    def test_shape_mismatch(self):
        ds = synth_blobs(3, 2, 10, 0.1, 0.5, 0.2, seed=5)
        state = train(ds, MLP, LossSpec("softmax"), QUICK)
        with pytest.raises(DimensionError):
            evaluate(state, synth_blobs(3, 3, 10, 0.1, 0.5, 0.2, seed=5))
        with pytest.raises(DimensionError):
            evaluate(state, synth_blobs(4, 2, 10, 0.1, 0.5, 0.2, seed=5))


class TestCheckpoint:
    @pytest.fixture
    def state(self):
        ds = synth_blobs(3, 2, 10, 0.1, 0.5, 0.2, seed=6)
        return train(ds, MLP, LossSpec("cm_margin", variant="additive_cosine", m=0.3), QUICK)

    def test_round_trip(self, state, tmp_path):
        save_checkpoint(state, tmp_path / "c.cmnc")
        back = load_checkpoint(tmp_path / "c.cmnc")
        assert params_bytes(back) == params_bytes(state)
        assert back.loss_spec == state.loss_spec
        assert back.optimizer == state.optimizer
        assert back.model.backbone == state.model.backbone
        assert back.epoch == state.epoch
        assert back.loss_history == state.loss_history
        assert back.rng_state == state.rng_state

    def test_fresh_model_round_trip(self, tmp_path):
        model = Model.build(BackboneConfig(channels=(2,)), (1, 4, 4), 10, Xoshiro256(1))
        state = TrainState(model, LossSpec(), OptimizerConfig())
        save_checkpoint(state, tmp_path / "c.cmnc")
        assert params_bytes(load_checkpoint(tmp_path / "c.cmnc")) == params_bytes(state)

    def test_layout(self, state, tmp_path):
        save_checkpoint(state, tmp_path / "c.cmnc")
        buf = (tmp_path / "c.cmnc").read_bytes()
        assert buf[:4] == b"CMNC"
        assert struct.unpack("<I", buf[4:8]) == (1,)
        (name_len,) = struct.unpack("<I", buf[8:12])
        assert buf[12 : 12 + name_len] == b"fc1.W"
        rank, d0, d1 = struct.unpack("<III", buf[12 + name_len : 24 + name_len])
        assert (rank, d0, d1) == (2, 2, 16)
        first = np.frombuffer(buf[24 + name_len : 24 + name_len + 8], dtype="<f8")[0]
        assert first == state.parameters["fc1.W"].value[0, 0]

    @pytest.mark.parametrize("cut", [2, 10, 30, -1])
    def test_truncated(self, state, tmp_path, cut):
        save_checkpoint(state, tmp_path / "c.cmnc")
        buf = (tmp_path / "c.cmnc").read_bytes()
        (tmp_path / "t.cmnc").write_bytes(buf[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.cmnc")

    def test_bad_magic(self, state, tmp_path):
        save_checkpoint(state, tmp_path / "c.cmnc")
        buf = bytearray((tmp_path / "c.cmnc").read_bytes())
        buf[:4] = b"NOPE"
        (tmp_path / "c.cmnc").write_bytes(bytes(buf))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c.cmnc")

    def test_future_version(self, state, tmp_path):
        save_checkpoint(state, tmp_path / "c.cmnc")
        buf = bytearray((tmp_path / "c.cmnc").read_bytes())
        buf[4:8] = struct.pack("<I", 2)
        (tmp_path / "c.cmnc").write_bytes(bytes(buf))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(tmp_path / "c.cmnc")
