import json
import tempfile
import unittest
from pathlib import Path

import yaml

from app import main
from experiments.runner import EXIT_CONFIG, EXIT_DATA, EXIT_OK


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, name, mapping) -> Path:
        path = self.dir / name
        path.write_text(yaml.safe_dump(mapping))
        return path

    def test_synth_run_evaluate_plot(self):
        """Synthesize CSVs, run on them, then recompute the report and figures from disk."""
        print("\n Testing the command-line pipeline ")
        synth = self.write_config("synth.yaml", {"data": {"synthesis": {"weeks": 70, "locations": 3, "queries": 3, "seed": 4}}})
        data_dir = self.dir / "data"
        self.assertEqual(main(["synth", "--config", str(synth), "--out", str(data_dir)]), EXIT_OK)
        self.assertTrue((data_dir / "incidence.csv").exists())
        self.assertTrue((data_dir / "queries.csv").exists())

        run = self.write_config("run.yaml", {
            "data": {"incidence": "data/incidence.csv", "queries": "data/queries.csv"},
            "models": [{"kind": "P"}, {"kind": "AR", "use_queries": True, "grid": {"lookback": 3}}],
            "horizons": [1],
            "max_weeks": 5,
        })
        out = self.dir / "run"
        self.assertEqual(main(["run", "--config", str(run), "--out", str(out), "--seed", "7"]), EXIT_OK)
        rmse_before = (out / "rmse.csv").read_text()
        manifest = json.loads((out / "manifest.json").read_text())
        ordering = manifest["ordering"]
        self.assertEqual(sorted(label for label, _ in ordering["1"]), ["AR+GT", "P"])
        (out / "rmse.csv").unlink()
        manifest["ordering"] = {}
        (out / "manifest.json").write_text(json.dumps(manifest))
        self.assertEqual(main(["evaluate", "--out", str(out)]), EXIT_OK)
        self.assertEqual((out / "rmse.csv").read_text(), rmse_before)
        self.assertEqual(json.loads((out / "manifest.json").read_text())["ordering"], ordering)
        self.assertEqual(main(["plot", "--out", str(out)]), EXIT_OK)
        self.assertTrue((out / "plots" / "rmse_h1.svg").exists())
        self.assertTrue((out / "plots" / "attr_AR_q_h1_loc00.svg").exists())

    def test_seed_override_reaches_synthesis(self):
        a, b = self.dir / "a", self.dir / "b"
        main(["synth", "--out", str(a), "--seed", "1"])
        main(["synth", "--out", str(b), "--seed", "2"])
        self.assertNotEqual((a / "incidence.csv").read_text(), (b / "incidence.csv").read_text())

    def test_error_exit_codes(self):
        self.assertEqual(main(["run", "--config", str(self.dir / "absent.yaml")]), EXIT_CONFIG)
        self.assertEqual(main(["run"]), EXIT_CONFIG)
        self.assertEqual(main(["evaluate", "--out", str(self.dir / "empty")]), EXIT_DATA)
        bad = self.write_config("bad.yaml", {"models": [{"kind": "P"}], "horizons": [1]})
        self.assertEqual(main(["run", "--config", str(bad), "--out", str(self.dir / "x")]), EXIT_CONFIG)


if __name__ == "__main__":
    unittest.main()
