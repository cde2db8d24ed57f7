import copy

import numpy as np
import pytest
import torch

from gazelab.data import GazeLabel, GazeSample, images_array, labels_array
from gazelab.errors import ConfigurationError, DataError, TrainingError
from gazelab.models import (GazeModel, TrainConfig, build_model, evaluate, forward_features,
                            images_to_tensor, load_checkpoint, predict, save_checkpoint,
                            train_model)


def params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestBuildModel:
    def test_head_shape_contract(self):
        model = build_model(feature_dim=64, output_dim=2, preset="small-cnn", seed=0)
        assert model.head_weights.shape == (2, 64)
        assert model.head_bias.shape == (2,)

    def test_decomposition_identity(self, rng):
        model = build_model(feature_dim=16, output_dim=2, preset="micro-cnn", seed=0, image_size=32)
        model.eval()
        images = rng.random((100, 32, 32, 3)).astype(np.float32)
        with torch.no_grad():
            x = images_to_tensor(images)
            full = model(x).numpy()
            feats = model.features(x)
            composed = (feats @ torch.from_numpy(model.head_weights.astype(np.float32)).T
                        + torch.from_numpy(model.head_bias.astype(np.float32))).numpy()
        assert np.abs(full - composed).max() <= 1e-5 * max(1.0, np.abs(full).max())

    def test_equal_seeds_identical_parameters(self):
        a = build_model(seed=11)
        b = build_model(seed=11)
        assert params_equal(a, b)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            build_model(preset="resnet-1000")

    def test_head_accessors_do_not_mutate(self):
        model = build_model(seed=0)
        w = model.head_weights
        w[:] = 99.0
        assert not np.allclose(model.head_weights, 99.0)


class TestTrainModel:
    def test_constant_label_improves(self, tiny_split):
        label = GazeLabel(5.0, -3.0)
        const = [GazeSample(s.image, label, s.id) for s in tiny_split.train]
        model = build_model(feature_dim=16, preset="micro-cnn", seed=2, image_size=32)
        before = np.abs(predict(model, images_array(const)) - labels_array(const)).sum(1).mean()
        train_model(model, const, TrainConfig(epochs=3, batch_size=16, seed=2))
        after = np.abs(predict(model, images_array(const)) - labels_array(const)).sum(1).mean()
        assert after < before

    def test_zero_learning_rate_is_identity(self, tiny_split):
        model = build_model(feature_dim=16, preset="micro-cnn", seed=3, image_size=32)
        frozen = copy.deepcopy(model)
        train_model(model, tiny_split.train, TrainConfig(epochs=1, batch_size=16,
                                                         learning_rate=0.0, seed=3))
        assert params_equal(model, frozen)

    def test_seeded_training_reproducible(self, tiny_split):
        losses = []
        for _ in range(2):
            model = build_model(feature_dim=16, preset="micro-cnn", seed=4, image_size=32)
            result = train_model(model, tiny_split.train, TrainConfig(epochs=2, batch_size=16, seed=4))
            losses.append([loss for _, loss in result.curve])
        assert losses[0] == losses[1]

    def test_curve_recorded(self, tiny_split):
        model = build_model(feature_dim=16, preset="micro-cnn", seed=5, image_size=32)
        result = train_model(model, tiny_split.train, TrainConfig(epochs=2, batch_size=16, seed=5))
        steps = [step for step, _ in result.curve]
        assert steps == list(range(len(steps))) and len(steps) > 0

    def test_empty_samples_error(self):
        model = build_model(feature_dim=16, preset="micro-cnn", seed=0, image_size=32)
        with pytest.raises(TrainingError):
            train_model(model, [], TrainConfig())

    def test_divergence_reports_last_finite_step(self, tiny_split):
        model = build_model(feature_dim=16, preset="micro-cnn", seed=6, image_size=32)

        def explode(model_, images, labels, mask):
            return (images.mean() * float("nan")).to(images.dtype)

        with pytest.raises(TrainingError, match="non-finite"):
            train_model(model, tiny_split.train, TrainConfig(epochs=1, batch_size=16, seed=6),
                        batch_loss_hook=explode)


class TestInference:
    def test_forward_features_shape(self, micro_model, tiny_split):
        feats = forward_features(micro_model, images_array(tiny_split.test))
        assert feats.shape == (len(tiny_split.test), 16)

    def test_features_compose_with_head(self, micro_model, tiny_split):
        images = images_array(tiny_split.test)
        feats = forward_features(micro_model, images)
        composed = feats @ micro_model.head_weights.T + micro_model.head_bias
        assert np.abs(composed - predict(micro_model, images)).max() < 1e-4

    def test_channel_mismatch_error(self, micro_model, rng):
        with pytest.raises(DataError):
            forward_features(micro_model, rng.random((2, 32, 32, 5)).astype(np.float32))

    def test_evaluate_constant_stub(self, tiny_split):
        label = GazeLabel(0.0, 90.0)
        fixed = [GazeSample(s.image, label, s.id) for s in tiny_split.test]

        class Stub(torch.nn.Module):
            def forward(self, x):
                return torch.tensor([[0.0, 90.0]]).repeat(len(x), 1)

        assert evaluate(Stub(), fixed) == pytest.approx(0.0, abs=1e-6)

        zero_stub_samples = [GazeSample(s.image, GazeLabel(0.0, 90.0), s.id) for s in tiny_split.test]

        class ZeroStub(torch.nn.Module):
            def forward(self, x):
                return torch.zeros(len(x), 2)

        assert evaluate(ZeroStub(), zero_stub_samples) == pytest.approx(90.0, abs=1e-5)

    def test_evaluate_matches_per_sample_oracle(self, micro_model, tiny_split):
        import math
        total = 0.0
        for s in tiny_split.test:
            pred = predict(micro_model, s.image[None])[0]

            def vec(pitch, yaw):
                p, y = math.radians(pitch), math.radians(yaw)
                return np.array([math.cos(p) * math.sin(y), math.sin(p), math.cos(p) * math.cos(y)])

            dot = float(np.clip(vec(*pred) @ vec(s.label.pitch, s.label.yaw), -1, 1))
            total += math.degrees(math.acos(dot))
        assert evaluate(micro_model, tiny_split.test) == pytest.approx(total / len(tiny_split.test), rel=1e-6)

    def test_evaluate_permutation_invariant(self, micro_model, tiny_split):
        forward_order = evaluate(micro_model, tiny_split.test)
        reverse_order = evaluate(micro_model, tiny_split.test[::-1])
        assert forward_order == pytest.approx(reverse_order, rel=1e-12)


class TestCheckpoints:
    def test_round_trip_bit_identical_forward(self, micro_model, tiny_split, tmp_path):
        save_checkpoint(micro_model, tmp_path / "ckpt", TrainConfig(), seed=1,
                        extra={"backdoored": False})
        restored, meta = load_checkpoint(tmp_path / "ckpt")
        assert meta["extra"]["backdoored"] is False
        images = images_array(tiny_split.test)
        assert np.array_equal(predict(micro_model, images), predict(restored, images))

    def test_missing_checkpoint_error(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope")
