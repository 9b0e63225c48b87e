import tempfile
import unittest
from pathlib import Path

import numpy as np

from flunow.dataset import (
    fit_normalizer,
    load_panel_csv,
    mixing_matrix,
    normalize,
    query_channels_for,
    save_panel_csv,
    select_top_queries,
    split,
    synthesize_panel,
)
from flunow.errors import DataError
from flunow.models import Direction, PanelDataset, SynthesisConfig, WeekRange, week_sequence
from flunow.stats import Stats


def write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadPanel(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_long_format_is_pivoted(self):
        """Incidence and queries come back as aligned T x L and T x Q arrays."""
        print("\n Testing CSV ingestion ")
        inc = write(self.dir / "inc.csv", "week,location,value\n"
                    "2010-W01,a,1\n2010-W01,b,10\n2010-W02,a,2\n2010-W02,b,20\n2010-W03,a,3\n2010-W03,b,30\n")
        qs = write(self.dir / "q.csv", "week,term,value\n"
                   "2010-W01,a/flu,5\n2010-W02,a/flu,6\n2010-W03,a/flu,7\n"
                   "2010-W01,fever,1\n2010-W02,fever,1\n2010-W03,fever,2\n")
        panel = load_panel_csv(inc, qs)
        print(panel.incidence)
        self.assertEqual(panel.weeks, ("2010-W01", "2010-W02", "2010-W03"))
        self.assertEqual(panel.location_ids, ("a", "b"))
        self.assertEqual(panel.query_ids, ("a/flu", "fever"))
        np.testing.assert_array_equal(panel.incidence[:, 1], [10, 20, 30])
        np.testing.assert_array_equal(panel.queries[:, 0], [5, 6, 7])

    def test_incomplete_location_is_dropped(self):
        inc = write(self.dir / "inc.csv", "week,location,value\n"
                    "2010-W01,a,1\n2010-W01,b,10\n2010-W02,a,2\n2010-W03,a,3\n2010-W03,b,30\n")
        with self.assertLogs("flunow.dataset", level="WARNING") as captured:
            panel = load_panel_csv(inc)
        print(captured.output)
        self.assertEqual(panel.location_ids, ("a",))
        self.assertEqual(panel.Q, 0)

    def test_non_numeric_value(self):
        inc = write(self.dir / "inc.csv", "week,location,value\n2010-W01,a,1\n2010-W02,a,lots\n")
        with self.assertRaisesRegex(DataError, "non-numeric value 'lots'"):
            load_panel_csv(inc)

    def test_infinite_value(self):
        for text in ("inf", "-inf", "Infinity"):
            inc = write(self.dir / "inc.csv", f"week,location,value\n2010-W01,a,1\n2010-W02,a,{text}\n")
            with self.assertRaisesRegex(DataError, f"non-numeric value '{text}' for \\(2010-W02, a\\)"):
                load_panel_csv(inc)

    def test_negative_value(self):
        """Counts and query volumes are non-negative; normalized panels may still go below 0."""
        inc = write(self.dir / "inc.csv", "week,location,value\n2010-W01,a,-5\n2010-W02,a,3\n")
        with self.assertRaisesRegex(DataError, "negative value '-5' for \\(2010-W01, a\\)"):
            load_panel_csv(inc)
        inc = write(self.dir / "inc.csv", "week,location,value\n2010-W01,a,1\n2010-W02,a,3\n")
        queries = write(self.dir / "q.csv", "week,term,value\n2010-W01,flu,0.5\n2010-W02,flu,-0.1\n")
        with self.assertRaisesRegex(DataError, "negative value '-0.1' for \\(2010-W02, flu\\)"):
            load_panel_csv(inc, queries)

    def test_duplicate_pair(self):
        inc = write(self.dir / "inc.csv", "week,location,value\n2010-W01,a,1\n2010-W01,a,2\n")
        with self.assertRaisesRegex(DataError, "duplicate"):
            load_panel_csv(inc)

    def test_malformed_header(self):
        inc = write(self.dir / "inc.csv", "date,location,value\n2010-W01,a,1\n")
        with self.assertRaisesRegex(DataError, "malformed header"):
            load_panel_csv(inc)

    def test_malformed_week(self):
        inc = write(self.dir / "inc.csv", "week,location,value\n2010-01-04,a,1\n")
        with self.assertRaises(DataError):
            load_panel_csv(inc)

    def test_saved_panel_loads_back(self):
        panel = synthesize_panel(SynthesisConfig(weeks=30, locations=3, queries=4, seed=2))
        paths = save_panel_csv(panel, self.dir / "incidence.csv", self.dir / "queries.csv")
        self.assertEqual(len(paths), 2)
        again = load_panel_csv(*paths)
        self.assertEqual(again.weeks, panel.weeks)
        self.assertEqual(again.location_ids, panel.location_ids)
        self.assertEqual(again.query_ids, panel.query_ids)
        np.testing.assert_allclose(again.incidence, panel.incidence, rtol=1e-12)
        np.testing.assert_allclose(again.queries, panel.queries, rtol=1e-12)


class TestSplitAndNormalize(unittest.TestCase):
    def setUp(self):
        weeks = week_sequence("2011-W10", 10)
        incidence = np.column_stack([np.arange(2.0, 12.0), np.full(10, 4.0)])
        self.panel = PanelDataset(weeks, incidence, np.zeros((10, 0)), ("x", "flat"))

    def test_split_sizes(self):
        print("\n Testing chronological split ")
        s = split(self.panel, 0.5)
        print(s)
        self.assertEqual((s.train_range.start, s.train_range.stop), (0, 5))
        self.assertEqual((s.test_range.start, s.test_range.stop), (5, 10))
        weeks = week_sequence("2011-W10", 11)
        odd = PanelDataset(weeks, np.ones((11, 1)), np.zeros((11, 0)), ("x",))
        self.assertEqual(split(odd, 0.5).train_range.stop, 5)
        with self.assertRaises(ValueError):
            split(self.panel, 1.0)
        with self.assertRaises(ValueError):
            split(self.panel, 0.05)

    def test_min_max_scaling(self):
        """Train-range min/max map to 0 and 1; later values may leave [0, 1]."""
        print("\n Testing normalization ")
        params = fit_normalizer(self.panel, WeekRange(0, 5))
        print(params.incidence)
        self.assertEqual(params.incidence["x"], (2.0, 6.0))
        out = normalize(self.panel, params)
        np.testing.assert_allclose(out.incidence[:5, 0], [0.0, 0.25, 0.5, 0.75, 1.0])
        self.assertAlmostEqual(out.incidence[9, 0], 2.25)
        np.testing.assert_array_equal(out.incidence[:, 1], np.zeros(10))
        back = normalize(out, params, Direction.INVERSE)
        np.testing.assert_allclose(back.incidence[:, 0], self.panel.incidence[:, 0], atol=1e-12)
        self.assertAlmostEqual(float(params.denormalize("x", 0.5)), 4.0)

    def test_unknown_series(self):
        params = fit_normalizer(self.panel, WeekRange(0, 5))
        renamed = PanelDataset(self.panel.weeks, self.panel.incidence, self.panel.queries, ("x", "other"))
        with self.assertRaises(KeyError):
            normalize(renamed, params)

    def test_empty_range(self):
        with self.assertRaises(ValueError):
            fit_normalizer(self.panel, WeekRange(3, 3))


class TestQueries(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        T = 40
        incidence = rng.random((T, 2))
        queries = np.column_stack([
            rng.random(T),
            3.0 * incidence[:, 1] + 1.0,
            np.full(T, 2.0),
            rng.random(T),
        ])
        self.panel = PanelDataset(week_sequence("2012-W01", T), incidence, queries,
                                  ("a", "b"), ("a/cough", "b/flu", "fever", "noise"))

    def test_top_query_selection(self):
        print("\n Testing query selection ")
        top = select_top_queries(self.panel, 4, WeekRange(0, 20))
        print(top)
        self.assertEqual(top[0], "b/flu")
        self.assertEqual(top[-1], "fever")
        self.assertEqual(select_top_queries(self.panel, 1, WeekRange(0, 20)), ["b/flu"])
        with self.assertRaises(ValueError):
            select_top_queries(self.panel, 5, WeekRange(0, 20))

    def test_selection_ignores_column_order(self):
        order = [3, 2, 1, 0]
        shuffled = PanelDataset(self.panel.weeks, self.panel.incidence, self.panel.queries[:, order],
                                self.panel.location_ids, tuple(self.panel.query_ids[i] for i in order))
        self.assertEqual(select_top_queries(shuffled, 3, WeekRange(0, 20)),
                         select_top_queries(self.panel, 3, WeekRange(0, 20)))

    def test_scoped_channels(self):
        self.assertEqual(query_channels_for(self.panel, "a"), ["a/cough", "fever", "noise"])
        self.assertEqual(query_channels_for(self.panel, "b"), ["b/flu", "fever", "noise"])
        with self.assertRaises(KeyError):
            query_channels_for(self.panel, "c")


class TestSynthesis(unittest.TestCase):
    def test_same_seed_same_panel(self):
        print("\n Testing synthetic panel determinism ")
        cfg = SynthesisConfig(weeks=60, locations=4, queries=6, seed=3)
        a, b = synthesize_panel(cfg), synthesize_panel(cfg)
        self.assertTrue(a.equals(b))
        self.assertFalse(a.equals(synthesize_panel(cfg, seed=4)))

    def test_noiseless_query_tracks_its_source(self):
        cfg = SynthesisConfig(weeks=80, locations=3, queries=1, noise=0.0, query_sources=[1], query_lags=[0], seed=9)
        panel = synthesize_panel(cfg)
        r = Stats.pearson(panel.queries[:, 0], panel.incidence[:, 1])
        print(f"pearson = {r}")
        self.assertAlmostEqual(r, 1.0, places=10)
        self.assertEqual(panel.query_ids, ("loc01/q000",))

    def test_default_shape(self):
        panel = synthesize_panel(SynthesisConfig(weeks=416, locations=37, queries=20, seed=7))
        self.assertEqual((panel.T, panel.L, panel.Q), (416, 37, 20))
        self.assertTrue((panel.incidence > 0).all())
        self.assertEqual(panel.weeks[0], "2009-W40")

    def test_distractors(self):
        panel = synthesize_panel(SynthesisConfig(weeks=30, locations=2, queries=4, distractor_fraction=0.5))
        self.assertEqual(sum(q.startswith("noise/") for q in panel.query_ids), 2)

    def test_mixing_rows_sum_to_one(self):
        m = mixing_matrix(6, 0.5)
        np.testing.assert_allclose(m.sum(axis=1), np.ones(6))
        self.assertEqual(m[0, 1], 0.25)
        self.assertEqual(m[0, 5], 0.25)
        self.assertEqual(m[0, 3], 0.0)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            SynthesisConfig(mixing=1.5)
        with self.assertRaises(ValueError):
            SynthesisConfig(rng="MT19937")


if __name__ == "__main__":
    unittest.main()
