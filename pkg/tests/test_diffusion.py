import math
import unittest

import numpy as np

from tlora_tool.adapters import AdapterKind
from tlora_tool.config import TrainingConfig
from tlora_tool.diffusion import (
    NoiseSchedule,
    TimestepSampler,
    ToyDataset,
    finetune,
    forward_diffuse,
    heldout_loss,
    parse_condition,
    pretrain,
    sample,
    sinusoidal_embedding,
)
from tlora_tool.errors import ConfigError, DomainError
from tlora_tool.linalg import make_rng

from tests.fixtures import TINY_T, adapter_config, tiny_dataset, tiny_denoiser


class NoiseScheduleTests(unittest.TestCase):
    def test_alpha_bar_layout(self):
        schedule = NoiseSchedule(T=100)
        self.assertEqual(schedule.beta.shape, (100,))
        self.assertEqual(schedule.alpha_bar.shape, (101,))
        self.assertEqual(schedule.alpha_bar[0], 1.0)
        self.assertTrue(np.all(np.diff(schedule.alpha_bar) < 0))
        self.assertAlmostEqual(schedule.posterior_variance(1), 0.0)

    def test_forward_diffuse_closed_form(self):
        schedule = NoiseSchedule(T=1)
        schedule.alpha_bar = np.array([1.0, 0.25])
        out = forward_diffuse(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), schedule)
        np.testing.assert_allclose(out, [0.5, math.sqrt(0.75)])

    def test_forward_diffuse_endpoints(self):
        schedule = NoiseSchedule(T=1000)
        z0, eps = np.array([[0.3, -0.2]]), np.array([[1.0, 2.0]])
        np.testing.assert_allclose(forward_diffuse(z0, np.array([1]), eps, schedule), z0, atol=0.05)
        np.testing.assert_allclose(forward_diffuse(z0, np.array([1000]), eps, schedule), eps, atol=0.05)
        with self.assertRaises(DomainError):
            forward_diffuse(z0, np.array([0]), eps, schedule)


class HelperTests(unittest.TestCase):
    def test_time_embedding_shape(self):
        features = sinusoidal_embedding(np.array([1, 5, 10]), 10, 6)
        self.assertEqual(features.shape, (3, 6))
        with self.assertRaises(DomainError):
            sinusoidal_embedding(1, 10, 5)

    def test_conditions(self):
        self.assertEqual(parse_condition("V*+c0"), ("V*", "c0"))
        self.assertEqual(parse_condition(["c3"]), ("c3",))
        with self.assertRaises(DomainError):
            parse_condition("+")

    def test_timestep_sampler_bounds(self):
        rng = make_rng(0)
        draws = TimestepSampler.uniform(10).draw(rng, 500)
        self.assertEqual((draws.min(), draws.max()), (1, 10))
        interval = TimestepSampler.interval(4, 6, 10).draw(rng, 200)
        self.assertTrue(set(interval.tolist()) <= {4, 5, 6})
        self.assertEqual(TimestepSampler.interval(0, 3, 10).low, 1)
        with self.assertRaises(DomainError):
            TimestepSampler.interval(5, 5, 10)

    def test_dataset_concept_points(self):
        dataset = tiny_dataset()
        self.assertEqual(dataset.concept_points.shape, (8, 2))
        self.assertEqual(dataset.mode_means.shape, (8, 2))
        np.testing.assert_allclose(dataset.concept_mean, [1.0, 0.0])
        self.assertLess(np.linalg.norm(dataset.concept_points.mean(axis=0) - dataset.concept_mean), 0.2)

    def test_concept_set_matches_target_moments(self):
        for seed in (0, 1, 5):
            for size in (3, 8):
                dataset = ToyDataset(concept_size=size, seed=seed)
                points = dataset.concept_points
                np.testing.assert_allclose(points.mean(axis=0), dataset.concept_mean, atol=1e-12)
                np.testing.assert_allclose(np.cov(points, rowvar=False, bias=True), dataset.concept_covariance, atol=1e-12)
        self.assertEqual(ToyDataset(concept_size=2, seed=0).concept_points.shape, (2, 2))


class DenoiserTests(unittest.TestCase):
    def test_predict_shape(self):
        denoiser = tiny_denoiser()
        cond = denoiser.embedding.embed([("c1",)] * 3)
        eps = denoiser.predict(np.zeros((3, 2)), np.array([1, 2, 3]), cond)
        self.assertEqual(eps.shape, (3, 2))

    def test_attached_adapters_do_not_change_the_output(self):
        base = tiny_denoiser()
        rng = make_rng(1)
        z = rng.standard_normal((4, 2))
        t = np.array([1, 5, 10, TINY_T])
        cond = base.embedding.embed([("V*", "c0")] * 4)
        reference = base.predict(z, t, cond)
        for kind in AdapterKind:
            r_min = 2 if kind.uses_schedule else None
            tuned = base.attach_adapters(adapter_config(kind.value, r_min=r_min), 3)
            np.testing.assert_allclose(tuned.predict(z, t, cond), reference, atol=1e-9)
            self.assertEqual(tuned.base_digest(), base.base_digest())
            with self.assertRaises(DomainError):
                tuned.attach_adapters(adapter_config(kind.value, r_min=r_min), 3)

    def test_masked_kind_without_r_min_is_a_config_error(self):
        with self.assertRaises(ConfigError):
            tiny_denoiser().attach_adapters(adapter_config("tlora", r_min=None), 0)

    def test_only_adapter_factors_are_trainable(self):
        tuned = tiny_denoiser().attach_adapters(adapter_config("ortho_lora", r_min=None), 0)
        names = sorted(param.name for param in tuned.trainable_parameters())
        self.assertEqual(names, ["h0.A", "h0.B", "h0.S", "h1.A", "h1.B", "h1.S"])


class TrainingTests(unittest.TestCase):
    def test_zero_pretraining_steps_leave_the_model_unchanged(self):
        denoiser = tiny_denoiser()
        digest = denoiser.base_digest()
        result = pretrain(tiny_dataset(), denoiser, 0, 0)
        self.assertEqual(result.losses, [])
        self.assertEqual(result.denoiser.base_digest(), digest)

    def test_pretraining_is_deterministic(self):
        first = pretrain(tiny_dataset(), tiny_denoiser(), 4, 7, batch_size=8)
        second = pretrain(tiny_dataset(), tiny_denoiser(), 4, 7, batch_size=8)
        self.assertEqual(first.losses, second.losses)
        self.assertEqual(first.denoiser.base_digest(), second.denoiser.base_digest())
        self.assertEqual(heldout_loss(first.denoiser, tiny_dataset(), 0), heldout_loss(second.denoiser, tiny_dataset(), 0))

    def test_finetuning_only_moves_adapter_factors(self):
        base = tiny_denoiser()
        digest = base.base_digest()
        training = TrainingConfig(lr=1e-2, metrics_every=1, record_trace=True)
        for kind in AdapterKind:
            r_min = 2 if kind.uses_schedule else None
            config = adapter_config(kind.value, r_min=r_min, lambda_reg=0.1 if kind is AdapterKind.ADALORA_SVD else 0.0)
            result = finetune(base, tiny_dataset(), config, TimestepSampler.uniform(TINY_T), 3, 0, training=training)
            self.assertEqual(base.base_digest(), digest)
            self.assertEqual(result.denoiser.base_digest(), digest)
            self.assertEqual(len(result.losses), 3)
            self.assertEqual([row.step for row in result.metrics], [1, 2, 3])
            self.assertEqual(sorted({row.step for row in result.trace}), [0, 1, 2, 3])
            fresh = base.attach_adapters(config, 0)
            moved = any(
                not np.array_equal(trained.A, initial.A) or not np.array_equal(trained.B, initial.B)
                for trained, initial in zip(result.denoiser.adapters.values(), fresh.adapters.values())
            )
            self.assertTrue(moved, kind.value)
            self.assertEqual(result.denoiser.frozen_digest(), fresh.frozen_digest(), kind.value)

    def test_frozen_initial_factors_are_bit_identical_after_training(self):
        config = adapter_config("tlora", r_min=1)
        base = tiny_denoiser()
        fresh = base.attach_adapters(config, 0)
        training = TrainingConfig(lr=1e-2, finetune_batch=8)
        result = finetune(base, tiny_dataset(), config, TimestepSampler.uniform(TINY_T), 25, 0, training=training)
        for name, initial in fresh.adapters.items():
            trained = result.denoiser.adapters[name]
            self.assertFalse(np.array_equal(trained.S, initial.S))
            for key in ("A0", "B0", "S0"):
                np.testing.assert_array_equal(getattr(trained, key), getattr(initial, key))
                self.assertEqual(getattr(trained, key).tobytes(), getattr(initial, key).tobytes())
        self.assertEqual(result.denoiser.frozen_digest(), fresh.frozen_digest())
        self.assertNotEqual(fresh.frozen_digest(), fresh.base_digest())

    def test_logged_rank_follows_interval_sampler(self):
        sampler = TimestepSampler.interval(16, TINY_T, TINY_T)
        result = finetune(
            tiny_denoiser(), tiny_dataset(), adapter_config("tlora", r_min=1), sampler, 6, 0,
            training=TrainingConfig(metrics_every=1),
        )
        schedule = next(iter(result.denoiser.adapters.values())).schedule
        for row in result.metrics:
            self.assertTrue(schedule.rank_at(TINY_T) <= row.rank_t <= schedule.rank_at(16))

    def test_finetune_rejects_mismatched_sampler(self):
        with self.assertRaises(DomainError):
            finetune(
                tiny_denoiser(), tiny_dataset(), adapter_config("tlora"), TimestepSampler.uniform(TINY_T + 1), 1, 0
            )


class SamplingTests(unittest.TestCase):
    def test_sampling_is_deterministic(self):
        denoiser = tiny_denoiser()
        first = sample(denoiser, "V*+c0", 5, 3)
        np.testing.assert_array_equal(first, sample(denoiser, ("V*", "c0"), 5, 3))
        self.assertEqual(first.shape, (5, 2))
        self.assertTrue(np.all(np.isfinite(first)))
        self.assertFalse(np.array_equal(first, sample(denoiser, "V*+c0", 5, 4)))

    def test_chains_do_not_depend_on_batch_size(self):
        denoiser = tiny_denoiser()
        np.testing.assert_allclose(sample(denoiser, "c2", 2, 9)[1], sample(denoiser, "c2", 5, 9)[1], atol=1e-9)

    def test_t_override(self):
        tuned = tiny_denoiser().attach_adapters(adapter_config("tlora"), 0)
        for layer in tuned.hidden:
            layer.adapter.B += 0.5
        self.assertEqual(sample(tuned, "V*+c0", 3, 1, t_override=0).shape, (3, 2))
        with self.assertRaises(DomainError):
            sample(tuned, "V*+c0", 3, 1, t_override=TINY_T + 1)
        with self.assertRaises(DomainError):
            sample(tuned, "c0+unbekannt", 3, 1)

    def test_inference_masks_follow_the_timestep(self):
        tuned = tiny_denoiser().attach_adapters(adapter_config("tlora", r_min=1), 0)
        for layer in tuned.hidden:
            layer.adapter.B[:] = make_rng(2).standard_normal(layer.adapter.B.shape)
        own_t = sample(tuned, "V*+c0", 4, 5)
        full_rank = sample(tuned, "V*+c0", 4, 5, t_override=0)
        self.assertFalse(np.allclose(own_t, full_rank))

    def test_empty_request(self):
        self.assertEqual(sample(tiny_denoiser(), "c0", 0, 0).shape, (0, 2))


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
