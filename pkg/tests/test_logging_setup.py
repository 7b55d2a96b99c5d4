import io
import logging
import unittest

from tlora_tool.logging_setup import LoggingManager


class LoggingManagerTests(unittest.TestCase):
    def setUp(self) -> None:
        self.stream = io.StringIO()
        self.manager = LoggingManager(stream=self.stream)
        self.manager.start_logging()

    def tearDown(self) -> None:
        self.manager.stop_logging()

    def test_threshold_filters_console_output(self) -> None:
        logger = logging.getLogger("tlora_tool.test")
        self.manager.set_level_threshold("WARNING")
        logger.info("leise")
        logger.warning("laut")
        output = self.stream.getvalue()
        self.assertNotIn("leise", output)
        self.assertIn("laut", output)
        self.manager.set_debug(True)
        self.assertEqual(self.manager.threshold, logging.DEBUG)
        logger.debug("details")
        self.assertIn("details", self.stream.getvalue())

    def test_level_threshold_validation(self) -> None:
        with self.assertRaises(ValueError):
            self.manager.set_level_threshold("")
        with self.assertRaises(ValueError):
            self.manager.set_level_threshold("LAUT")
        self.assertEqual(self.manager.set_level_threshold("error"), "ERROR")

    def test_log_system_feeds_the_journal(self) -> None:
        self.manager.log_system("Checkpoint fehlt", severity="error", event="checkpoint")
        self.manager.log_system("Start")
        events = self.manager.journal.snapshot()
        self.assertEqual([(e.name, e.severity) for e in events], [("checkpoint", "error"), ("System", "info")])
        self.assertIn("Checkpoint fehlt", self.stream.getvalue())

    def test_stop_removes_the_handler(self) -> None:
        self.manager.stop_logging()
        self.assertNotIn(self.manager.handler, logging.getLogger().handlers)
        self.manager.start_logging()


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
