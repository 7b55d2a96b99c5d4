import json
import pathlib
import tempfile
import unittest

from tlora_tool.adapters import AdapterKind
from tlora_tool.config import (
    AdapterConfig,
    ConfigWriter,
    ExperimentConfig,
    TrainingConfig,
    default_experiment_config,
    load_config,
)
from tlora_tool.errors import ConfigError

from tests.fixtures import tiny_config_payload, write_config


class ExperimentConfigTests(unittest.TestCase):
    def test_defaults_are_valid(self):
        config = default_experiment_config()
        self.assertEqual(config.adapter.adapter_kind, AdapterKind.TLORA)
        self.assertEqual((config.adapter.r, config.adapter.r_min), (32, 16))
        self.assertEqual(config.schedule.T, 1000)

    def test_unknown_keys_name_the_field(self):
        with self.assertRaises(ConfigError) as ctx:
            ExperimentConfig.from_dict({"adapter": {"rank": 4}})
        self.assertEqual(ctx.exception.field, "adapter.rank")
        with self.assertRaises(ConfigError) as ctx:
            ExperimentConfig.from_dict({"modell": {}})
        self.assertEqual(ctx.exception.field, "modell")

    def test_r_min_rules(self):
        with self.assertRaises(ConfigError) as ctx:
            AdapterConfig(kind="tlora", r=4, r_min=8).validate()
        self.assertEqual(ctx.exception.field, "adapter.r_min")
        with self.assertRaises(ConfigError):
            AdapterConfig(kind="vanilla_tlora", r=4, r_min=None).validate()
        AdapterConfig(kind="plain_lora", r=4, r_min=None).validate()

    def test_r_min_is_dropped_for_unscheduled_kinds(self):
        config = AdapterConfig(kind="ortho_lora", r=4, r_min=2)
        self.assertIsNone(config.effective_r_min())
        self.assertTrue(config.ignores_r_min)
        self.assertFalse(AdapterConfig(kind="tlora", r=4, r_min=2).ignores_r_min)
        self.assertFalse(AdapterConfig(kind="plain_lora", r=4, r_min=None).ignores_r_min)

    def test_rank_larger_than_layer(self):
        with self.assertRaises(ConfigError) as ctx:
            ExperimentConfig.from_dict({"denoiser": {"hidden": 8}, "adapter": {"r": 16, "r_min": 4}})
        self.assertEqual(ctx.exception.field, "adapter.r")

    def test_sampler_interval_limits(self):
        with self.assertRaises(ConfigError) as ctx:
            ExperimentConfig.from_dict({"schedule": {"T": 10}, "sampler": {"mode": "interval", "lo": 2, "hi": 20}})
        self.assertEqual(ctx.exception.field, "sampler.hi")
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict({"sampler": {"mode": "gauss"}})

    def test_default_step_counts(self):
        training = TrainingConfig()
        self.assertEqual(training.steps_for(AdapterKind.PLAIN_LORA), 500)
        self.assertEqual(training.steps_for(AdapterKind.TLORA), 800)
        self.assertEqual(TrainingConfig(finetune_steps=3).steps_for(AdapterKind.TLORA), 3)

    def test_with_adapter_revalidates(self):
        config = ExperimentConfig.from_dict(tiny_config_payload())
        self.assertEqual(config.with_adapter(kind="plain_lora", r_min=None).adapter.kind, "plain_lora")
        with self.assertRaises(ConfigError):
            config.with_adapter(r=2, r_min=3)


class ConfigFileTests(unittest.TestCase):
    def test_write_and_load(self):
        config = ExperimentConfig.from_dict(tiny_config_payload("ortho_lora"))
        with tempfile.TemporaryDirectory() as tmp_dir:
            target = ConfigWriter(pathlib.Path(tmp_dir) / "sub" / "config.json").write(config)
            self.assertEqual(load_config(target), config)
            data = json.loads(target.read_text(encoding="utf-8"))
            self.assertEqual(data["adapter"]["kind"], "ortho_lora")

    def test_malformed_json_propagates(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            target = pathlib.Path(tmp_dir) / "broken.json"
            target.write_text("{ nicht json", encoding="utf-8")
            with self.assertRaises(json.JSONDecodeError):
                load_config(target)

    def test_output_paths_follow_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            config = load_config(write_config(pathlib.Path(tmp_dir), tiny_config_payload()))
            resolved = config.output.resolve("metrics", pathlib.Path(tmp_dir) / "run" / "model.tlra")
            self.assertEqual(resolved, pathlib.Path(tmp_dir) / "run" / "metrics.csv")

    def test_writer_rejects_directory(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            with self.assertRaises(ValueError):
                ConfigWriter(tmp_dir)


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
