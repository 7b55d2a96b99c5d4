import logging
import unittest

import numpy as np

from tlora_tool.diagnostics import ProgressLogger, check_finite, guarded_action
from tlora_tool.errors import NumericalError


class GuardedActionTests(unittest.TestCase):
    def test_guarded_action_logs_duration(self):
        logger = logging.getLogger("test_guard")

        @guarded_action("Testlauf", logger)
        def _fake_task():
            return "ok"

        with self.assertLogs(logger, level="INFO") as captured:
            result = _fake_task()
        self.assertEqual(result, "ok")
        self.assertTrue(any("Testlauf – erfolgreich" in line for line in captured.output))

    def test_guarded_action_reraises(self):
        logger = logging.getLogger("test_guard_fail")

        @guarded_action("Absturz", logger)
        def _broken():
            raise NumericalError("Verlust ist nicht endlich")

        with self.assertLogs(logger, level="ERROR") as captured:
            with self.assertRaises(NumericalError):
                _broken()
        self.assertIn("Absturz – fehlgeschlagen", captured.output[0])


class CheckFiniteTests(unittest.TestCase):
    def test_values(self):
        check_finite(1.5, "Verlust")
        check_finite(np.zeros(3), "Gewichte")
        with self.assertRaises(NumericalError):
            check_finite(float("nan"), "Verlust")
        with self.assertRaises(NumericalError):
            check_finite(np.array([1.0, np.inf]), "Gewichte")


class ProgressLoggerTests(unittest.TestCase):
    def test_logs_every_interval_and_last_step(self):
        logger = logging.getLogger("test_progress")
        progress = ProgressLogger("Training", 5, logger, every=2)
        with self.assertLogs(logger, level="INFO") as captured:
            for step in range(1, 6):
                progress.step(step, 0.5)
        self.assertEqual(len(captured.output), 3)
        self.assertIn("Schritt 5/5", captured.output[-1])
        with self.assertRaises(ValueError):
            ProgressLogger("Training", -1, logger)


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
