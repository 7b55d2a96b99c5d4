import unittest

from tlora_tool.adapters import AdapterKind
from tlora_tool.gradcheck import GradientCheck, masked_gradients_are_zero


class GradientCheckTests(unittest.TestCase):
    def test_full_check_passes(self):
        check = GradientCheck(seed=0)
        report = check.full_check()
        self.assertEqual(report["gesamt"], "ok", check.human_summary(report))
        for kind in AdapterKind:
            self.assertEqual(report[f"schicht_{kind.value}"], "ok")
            self.assertEqual(report[f"denoiser_{kind.value}"], "ok")
        self.assertEqual(report["maske_tlora"], "ok")
        self.assertIn("linear_info", report)

    def test_masked_components_get_exact_zero_gradient(self):
        for kind in (AdapterKind.TLORA, AdapterKind.VANILLA_TLORA):
            self.assertTrue(masked_gradients_are_zero(kind, seed=3))
        with self.assertRaises(ValueError):
            masked_gradients_are_zero(AdapterKind.PLAIN_LORA)

    def test_overall_classification_and_summary(self):
        check = GradientCheck()
        self.assertEqual(check.classify_overall({"a": "ok", "a_info": "fehler"}), "ok")
        self.assertEqual(check.classify_overall({"a": "ok", "b": "fehler"}), "fehler")
        lines = check.human_summary({"a": "ok", "a_info": "max. relativer Fehler 1.00e-09", "gesamt": "ok"})
        self.assertEqual(lines[0], "Gradientenprüfung gesamt: ok")
        self.assertIn("a: ok (max. relativer Fehler 1.00e-09)", lines)

    def test_invalid_settings(self):
        with self.assertRaises(ValueError):
            GradientCheck(tolerance=0.0)


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
