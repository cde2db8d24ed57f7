import numpy as np
import pytest
import torch

from gazelab.attacks import (IadaTrainConfig, PoisonConfig, TriggerSpec, adaptive_loss,
                             apply_patch_trigger, apply_stego_trigger, apply_warp_trigger,
                             build_warp_field, poison_dataset, select_clean_label_targets,
                             train_iada_generator, trigger_transform, warp_with_field)
from gazelab.data import GazeLabel, GazeSample, angular_error_batch, images_array
from gazelab.errors import ConfigurationError, NumericalGuardError
from gazelab.models import TrainConfig, build_model, predict, train_model


class TestPatchTrigger:
    def test_paper_patch_geometry(self):
        image = np.zeros((64, 64, 3), dtype=np.float32)
        out = apply_patch_trigger(image, size=20, color=(1.0, 0.0, 0.0), corner="bottom-right")
        changed = np.any(out != image, axis=2)
        assert changed.sum() == 400
        assert np.all(out[44:, 44:, 0] == 1.0)
        assert np.all(out[44:, 44:, 1:] == 0.0)
        assert np.all(image == 0.0)  # input untouched

    def test_size_zero_identity(self, rng):
        image = rng.random((16, 16, 3)).astype(np.float32)
        assert np.array_equal(apply_patch_trigger(image, size=0), image)

    def test_idempotent(self, rng):
        image = rng.random((32, 32, 3)).astype(np.float32)
        once = apply_patch_trigger(image, size=5)
        twice = apply_patch_trigger(once, size=5)
        assert np.array_equal(once, twice)

    def test_out_of_bounds(self, rng):
        with pytest.raises(ConfigurationError):
            apply_patch_trigger(np.zeros((16, 16, 3)), size=17)

    def test_corners(self):
        image = np.zeros((8, 8, 3), dtype=np.float32)
        top_left = apply_patch_trigger(image, size=2, corner="top-left")
        assert top_left[:2, :2].sum() > 0 and top_left[2:, 2:].sum() == 0


def oracle_warp_field(shape, grid_size, strength, seed):
    """Scalar-loop reimplementation of the displacement field construction."""
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-1.0, 1.0, size=(grid_size, grid_size, 2))
    offsets = offsets / np.mean(np.abs(offsets))
    h, w = shape
    out = np.zeros((h, w, 2))
    for r in range(h):
        for c in range(w):
            gr = r * (grid_size - 1.0) / (h - 1.0)
            gc = c * (grid_size - 1.0) / (w - 1.0)
            r0 = min(int(np.floor(gr)), grid_size - 2)
            c0 = min(int(np.floor(gc)), grid_size - 2)
            fr, fc = gr - r0, gc - c0
            for k in range(2):
                out[r, c, k] = strength * (
                    offsets[r0, c0, k] * (1 - fr) * (1 - fc)
                    + offsets[r0, c0 + 1, k] * (1 - fr) * fc
                    + offsets[r0 + 1, c0, k] * fr * (1 - fc)
                    + offsets[r0 + 1, c0 + 1, k] * fr * fc)
    return out


class TestWarpTrigger:
    def test_zero_strength_identity(self, rng):
        image = rng.random((24, 24, 3)).astype(np.float32)
        out = apply_warp_trigger(image, grid_size=4, strength=0.0, seed=3)
        assert np.abs(out - image).max() <= 1e-6

    def test_seeded_field_deterministic(self):
        a = build_warp_field((32, 32), 4, 0.5, seed=9)
        b = build_warp_field((32, 32), 4, 0.5, seed=9)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, build_warp_field((32, 32), 4, 0.5, seed=10))

    def test_field_matches_bruteforce_oracle(self):
        field = build_warp_field((16, 16), 4, 0.5, seed=7)
        oracle = oracle_warp_field((16, 16), 4, 0.5, seed=7)
        assert np.abs(field - oracle).max() < 1e-12
        # frozen from the oracle run: mean absolute displacement for k=4, s=0.5
        assert np.abs(field).mean() == pytest.approx(0.3562665756734359, rel=1e-9)

    def test_resampling_matches_scalar_oracle(self, rng):
        image = rng.random((12, 12, 3))
        field = build_warp_field((12, 12), 3, 1.5, seed=2)
        out = warp_with_field(image, field)
        for r, c in [(0, 0), (5, 7), (11, 11), (3, 4)]:
            rr = min(max(r + field[r, c, 0], 0.0), 11.0)
            cc = min(max(c + field[r, c, 1], 0.0), 11.0)
            r0, c0 = min(int(np.floor(rr)), 10), min(int(np.floor(cc)), 10)
            fr, fc = rr - r0, cc - c0
            expect = (image[r0, c0] * (1 - fr) * (1 - fc) + image[r0, c0 + 1] * (1 - fr) * fc
                      + image[r0 + 1, c0] * fr * (1 - fc) + image[r0 + 1, c0 + 1] * fr * fc)
            assert np.abs(out[r, c] - np.clip(expect, 0, 1)).max() < 1e-9

    def test_output_in_unit_range(self, rng):
        image = rng.random((20, 20, 3)).astype(np.float32)
        out = apply_warp_trigger(image, grid_size=4, strength=2.0, seed=1)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestCleanLabelSelection:
    def make(self, labels):
        return [GazeSample(np.zeros((4, 4, 3), np.float32), GazeLabel(*l), f"s{i}")
                for i, l in enumerate(labels)]

    def test_delta_zero_exact_match(self):
        samples = self.make([(0.0, 0.0), (1.0, 0.0), (0.0, 2.0)])
        assert select_clean_label_targets(samples, (0.0, 0.0), 0.0) == ["s0"]

    def test_delta_huge_selects_all(self):
        samples = self.make([(0.0, 0.0), (30.0, -40.0), (-50.0, 80.0)])
        assert len(select_clean_label_targets(samples, (0.0, 0.0), 360.0)) == 3

    def test_componentwise_against_linear_scan(self, tiny_dataset):
        target, delta = (0.0, 0.0), 5.0
        ids = select_clean_label_targets(tiny_dataset, target, delta)
        expected = [s.id for s in tiny_dataset
                    if abs(s.label.pitch) <= delta and abs(s.label.yaw) <= delta]
        assert ids == expected

    def test_empty_selection_warns(self):
        samples = self.make([(30.0, 30.0)])
        with pytest.warns(UserWarning):
            assert select_clean_label_targets(samples, (0.0, 0.0), 1.0) == []


class TestStegoTrigger:
    def test_amplitude_clamp(self, rng):
        image = rng.random((16, 16, 3)).astype(np.float32)
        out = apply_stego_trigger(image, "101", amplitude=0.02)
        assert np.abs(out - image).max() <= 0.02 + 1e-7
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_per_image(self, rng):
        image = rng.random((16, 16, 3)).astype(np.float32)
        assert np.array_equal(apply_stego_trigger(image, "101"), apply_stego_trigger(image, "101"))

    def test_sample_specific(self, rng):
        a = rng.random((16, 16, 3)).astype(np.float32)
        b = rng.random((16, 16, 3)).astype(np.float32)
        res_a = apply_stego_trigger(a, "101") - a
        res_b = apply_stego_trigger(b, "101") - b
        assert np.abs(res_a - res_b).sum() > 0

    def test_amplitude_validation(self, rng):
        with pytest.raises(ConfigurationError):
            apply_stego_trigger(np.zeros((4, 4, 3)), "1", amplitude=0.5)


class TestPoisonDataset:
    def test_counts(self, tiny_dataset):
        spec = TriggerSpec("patch", params={"size": 4})
        out = poison_dataset(tiny_dataset[:90], spec, PoisonConfig(ratio=0.1, seed=0))
        assert len(out.poisoned_ids) == 9
        out = poison_dataset(tiny_dataset[:80], spec, PoisonConfig(ratio=0.1, seed=0))
        assert len(out.poisoned_ids) == 8

    def test_full_ratio(self, tiny_dataset):
        spec = TriggerSpec("patch", params={"size": 4})
        out = poison_dataset(tiny_dataset[:20], spec, PoisonConfig(ratio=1.0, seed=0))
        assert len(out.poisoned_ids) == 20

    def test_patch_rewrites_labels(self, tiny_dataset):
        spec = TriggerSpec("patch", target_label=(3.0, -4.0), params={"size": 4})
        out = poison_dataset(tiny_dataset[:30], spec, PoisonConfig(ratio=0.2, seed=1))
        for s in out.samples:
            if s.poisoned:
                assert (s.label.pitch, s.label.yaw) == (3.0, -4.0)

    def test_clean_label_keeps_labels(self, tiny_dataset):
        spec = TriggerSpec("clean_label", target_label=(0.0, 0.0), params={"size": 4, "delta": 15.0})
        originals = {s.id: s.label for s in tiny_dataset[:60]}
        out = poison_dataset(tiny_dataset[:60], spec, PoisonConfig(ratio=0.2, seed=1))
        for s in out.samples:
            assert s.label == originals[s.id]
            if s.poisoned:
                assert abs(s.label.pitch) <= 15.0 and abs(s.label.yaw) <= 15.0

    def test_clean_label_empty_selection_error(self, tiny_dataset):
        spec = TriggerSpec("clean_label", target_label=(80.0, 170.0), params={"size": 4, "delta": 0.5})
        with pytest.warns(UserWarning):
            with pytest.raises(ConfigurationError):
                poison_dataset(tiny_dataset[:20], spec, PoisonConfig(ratio=0.2, seed=1))

    def test_preserves_ids_and_inputs(self, tiny_dataset):
        subset = tiny_dataset[:25]
        snapshot = [s.image.copy() for s in subset]
        spec = TriggerSpec("patch", params={"size": 4})
        out = poison_dataset(subset, spec, PoisonConfig(ratio=0.3, seed=2))
        assert [s.id for s in out.samples] == [s.id for s in subset]
        assert all(np.array_equal(a, s.image) for a, s in zip(snapshot, subset))
        for orig, new in zip(subset, out.samples):
            if new.poisoned:
                assert not np.array_equal(orig.image, new.image)

    def test_ratio_validation(self):
        with pytest.raises(ConfigurationError):
            PoisonConfig(ratio=0.0)

    def test_triggered_outputs_in_unit_range(self, tiny_dataset):
        for variant, params in [("patch", {"size": 4}), ("warp", {}), ("stego", {})]:
            spec = TriggerSpec(variant, params=params)
            out = poison_dataset(tiny_dataset[:10], spec, PoisonConfig(ratio=1.0, seed=3))
            for s in out.samples:
                assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def oracle_adaptive_loss(poisoned, benign, weights):
    """Direct numpy angle/variance implementation."""
    def angles(feats):
        out = np.zeros((len(feats), len(weights)))
        for i, h in enumerate(feats):
            for j, w in enumerate(weights):
                cos = h @ w / (np.linalg.norm(h) * np.linalg.norm(w))
                out[i, j] = np.arccos(np.clip(cos, -1 + 1e-7, 1 - 1e-7))
        return out

    ap, ab = angles(poisoned), angles(benign)
    ratio = np.mean(np.var(ap, axis=0) / np.var(ab, axis=0))
    return abs(1.0 - ratio)


class TestAdaptiveLoss:
    def test_identical_batches_zero(self, rng):
        feats = torch.from_numpy(rng.random((5, 4)).astype(np.float32))
        w = torch.from_numpy(rng.random((2, 4)).astype(np.float32))
        assert float(adaptive_loss(feats, feats, w)) == pytest.approx(0.0, abs=1e-6)

    def test_constant_poisoned_gives_one(self, rng):
        benign = torch.from_numpy(rng.random((6, 4)).astype(np.float32))
        poisoned = torch.ones(6, 4)
        w = torch.from_numpy(rng.random((2, 4)).astype(np.float32))
        assert float(adaptive_loss(poisoned, benign, w)) == pytest.approx(1.0, abs=1e-6)

    def test_matches_numpy_oracle(self, rng):
        poisoned = rng.random((4, 3))
        benign = rng.random((4, 3))
        weights = rng.random((2, 3))
        value = float(adaptive_loss(torch.from_numpy(poisoned), torch.from_numpy(benign),
                                    torch.from_numpy(weights)))
        assert value == pytest.approx(oracle_adaptive_loss(poisoned, benign, weights), rel=1e-9)

    def test_zero_benign_variance_guard(self, rng):
        benign = torch.ones(5, 4)
        poisoned = torch.from_numpy(rng.random((5, 4)).astype(np.float32))
        with pytest.raises(NumericalGuardError):
            adaptive_loss(poisoned, benign, torch.from_numpy(rng.random((2, 4)).astype(np.float32)))

    def test_differentiable(self, rng):
        poisoned = torch.from_numpy(rng.random((5, 4))).requires_grad_(True)
        benign = torch.from_numpy(rng.random((5, 4)))
        w = torch.from_numpy(rng.random((2, 4)))
        adaptive_loss(poisoned, benign, w).backward()
        assert poisoned.grad is not None and torch.isfinite(poisoned.grad).all()


class TestIada:
    def test_patterns_input_dependent(self, tiny_split):
        model = build_model(feature_dim=16, preset="micro-cnn", seed=8, image_size=32)
        result = train_iada_generator(tiny_split.train, model,
                                      IadaTrainConfig(steps=30, batch_size=8, seed=8))
        images = images_array(tiny_split.test[:2])
        with torch.no_grad():
            from gazelab.models import images_to_tensor
            patterns = result.generator(images_to_tensor(images))
        assert float((patterns[0] - patterns[1]).abs().sum()) > 0

    def test_zero_steps_deterministic_init(self, tiny_split):
        outs = []
        for _ in range(2):
            model = build_model(feature_dim=16, preset="micro-cnn", seed=9, image_size=32)
            result = train_iada_generator(tiny_split.train, model,
                                          IadaTrainConfig(steps=0, batch_size=8, seed=9))
            outs.append([p.detach().clone() for p in result.generator.parameters()])
        assert all(torch.equal(a, b) for a, b in zip(outs[0], outs[1]))

    def test_joint_training_beats_benign_baseline(self, tiny_split):
        target = (0.0, 0.0)
        benign_model = build_model(feature_dim=16, preset="micro-cnn", seed=10, image_size=32)
        train_model(benign_model, tiny_split.train, TrainConfig(epochs=6, batch_size=16, seed=10))
        victim = build_model(feature_dim=16, preset="micro-cnn", seed=11, image_size=32)
        result = train_iada_generator(tiny_split.train, victim,
                                      IadaTrainConfig(steps=250, batch_size=16, seed=11),
                                      target_label=target)
        spec = TriggerSpec("iada", target_label=target, params={"generator": result.generator})
        transform = trigger_transform(spec)
        triggered = np.stack([transform(s.image) for s in tiny_split.test])
        target_rows = np.tile(target, (len(triggered), 1))
        ae_victim = np.mean(angular_error_batch(predict(result.model, triggered), target_rows))
        ae_benign = np.mean(angular_error_batch(predict(benign_model, triggered), target_rows))
        assert ae_victim < ae_benign


class TestTriggerSpec:
    def test_serialization_round_trip(self):
        spec = TriggerSpec("warp", target_label=(1.0, -2.0), params={"grid_size": 6}, seed=3)
        back = TriggerSpec.from_dict(spec.to_dict())
        assert back.variant == "warp" and back.params["grid_size"] == 6
        assert back.target_label == (1.0, -2.0) and back.seed == 3

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            TriggerSpec("sticker")

    def test_iada_without_generator_rejected_at_transform(self):
        spec = TriggerSpec("iada")
        with pytest.raises(ConfigurationError):
            trigger_transform(spec)

    def test_warp_validation(self):
        with pytest.raises(ConfigurationError):
            TriggerSpec("warp", params={"grid_size": 1})
        with pytest.raises(ConfigurationError):
            TriggerSpec("warp", params={"strength": -1.0})
