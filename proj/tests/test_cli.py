"""End-to-end checks of the kbal command line tool."""

import csv
import json
import os
import subprocess
import sys
import tempfile
import unittest

import jsonschema

KBAL, SCHEMA, DATA_DIR = sys.argv[1:4]


def run(*args, cwd=None):
    return subprocess.run([KBAL, *args], capture_output=True, text=True, cwd=cwd)


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(line for line in f if not line.startswith("#")))


def write_rows(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(str(v) for v in r) + "\n")


class Cli(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        with open(SCHEMA) as f:
            self.schema = json.load(f)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def test_identical_groups_get_uniform_weights(self):
        rows = [(d, x, y, x + d) for d in (1, 0) for x, y in ((0.1, 1), (0.7, 2), (1.3, 0), (2.0, 1))]
        write_rows(self.path("in.csv"), ["treat", "x", "z", "y"], rows)
        out = self.path("out")
        r = run("estimate", "--input", self.path("in.csv"), "--outcome-col", "y", "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        weights = read_csv(os.path.join(out, "weights.csv"))
        self.assertEqual(weights[0], ["unit_id", "weight"])
        # Treated units carry 1/N1 and controls 1/N0; here both are 1/4.
        self.assertEqual(len(weights), 9)
        for _, w in weights[1:]:
            self.assertAlmostEqual(float(w), 0.25, places=9)
        with open(os.path.join(out, "report.json")) as f:
            rep = json.load(f)
        jsonschema.validate(rep, self.schema)
        self.assertAlmostEqual(rep["point"], 1.0, places=9)
        self.assertEqual(rep["min90"], 4)

    def test_report_matches_schema_and_rgrid(self):
        write_rows(
            self.path("in.csv"),
            ["treat", "a", "b", "y"],
            [(i % 3 == 0 and 1 or 0, (i * 37 % 11) / 3.0, (i * 17 % 7) / 2.0, i % 5) for i in range(60)],
        )
        out = self.path("out")
        r = run("weights", "--input", self.path("in.csv"), "--out", out, "--r-max", "8", "--patience", "3")
        self.assertEqual(r.returncode, 0, r.stderr)
        with open(os.path.join(out, "report.json")) as f:
            rep = json.load(f)
        jsonschema.validate(rep, self.schema)
        self.assertNotIn("point", rep)
        self.assertEqual(rep["config"]["r_max"], 8)
        self.assertEqual(rep["config"]["b"], 3.0)
        grid = read_csv(os.path.join(out, "rgrid.csv"))
        self.assertEqual(grid[0], ["r", "l1", "feasible", "iterations"])
        self.assertGreaterEqual(len(grid) - 1, rep["r"])
        self.assertLessEqual(len(grid) - 1, 8)
        self.assertEqual([int(g[0]) for g in grid[1:]], list(range(1, len(grid))))
        with open(os.path.join(out, "weights.csv")) as f:
            self.assertTrue(f.readline().startswith("# kbal "))
            self.assertIn('"command":"weights"', f.readline())

    def test_unknown_flag_exits_2(self):
        r = run("weights", "--input", "x.csv", "--frobnicate")
        self.assertEqual(r.returncode, 2)
        self.assertEqual(run().returncode, 2)
        self.assertEqual(run("estimate", "--estimand", "late").returncode, 2)

    def test_infeasible_exits_1_with_advice(self):
        rows = [(0, x / 10.0) for x in range(10)] + [(1, 50 + x / 10.0) for x in range(5)]
        write_rows(self.path("in.csv"), ["treat", "x"], rows)
        r = run("weights", "--input", self.path("in.csv"), "--b", "0.01", "--out", self.path("out"))
        self.assertEqual(r.returncode, 1)
        self.assertIn("larger b", r.stderr)
        self.assertIn("trimratio", r.stderr)

    def test_bad_input_exits_1(self):
        write_rows(self.path("in.csv"), ["treat", "x"], [(2, 0.5), (0, 1.0)])
        r = run("weights", "--input", self.path("in.csv"), "--out", self.path("out"))
        self.assertEqual(r.returncode, 1)
        self.assertIn("error:", r.stderr)

    def test_simulate_is_deterministic(self):
        outs = []
        for k, threads in enumerate(("1", "2")):
            out = self.path(f"sim{k}")
            r = run("simulate", "--study", "figure12", "--reps", "50", "--seed", "7", "--n", "200",
                    "--threads", threads, "--out", out)
            self.assertEqual(r.returncode, 0, r.stderr)
            with open(os.path.join(out, "figure12.csv"), "rb") as f:
                outs.append(f.read())
        self.assertEqual(outs[0], outs[1])
        with open(os.path.join(self.path("sim0"), "figure12.json")) as f:
            summary = json.load(f)
        self.assertEqual(summary["replications"], 50)
        self.assertEqual(summary["config"]["seed"], 7)
        methods = {row["method"] for row in summary["summary"]}
        self.assertEqual(methods, {"raw", "matching", "matching+", "mean_balance", "kbal"})

    def test_lalonde_offline(self):
        out = self.path("lal")
        r = run("estimate", "--benchmark", "lalonde", "--outcome-col", "re78", "--offline", "--data-dir", DATA_DIR,
                "--cache-dir", self.path("cache"), "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        with open(os.path.join(out, "report.json")) as f:
            rep = json.load(f)
        jsonschema.validate(rep, self.schema)
        self.assertEqual(rep["r"], 40)
        self.assertAlmostEqual(rep["point"], 1766.93, delta=1.0)

    def test_baselines_and_fetch(self):
        r = run("fetch", "--offline", "--data-dir", DATA_DIR, "--cache-dir", self.path("cache"))
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertEqual(len(r.stdout.split()), 2)
        out = self.path("base")
        r = run("baselines", "--benchmark", "lalonde", "--outcome-col", "re78", "--offline", "--data-dir", DATA_DIR,
                "--cache-dir", self.path("cache"), "--out", out)
        self.assertEqual(r.returncode, 0, r.stderr)
        with open(os.path.join(out, "baselines.json")) as f:
            methods = [x["method"] for x in json.load(f)["results"]]
        self.assertEqual(methods, ["raw_dim", "mean_balance_x", "mahalanobis_match", "least_squares"])
        self.assertEqual(read_csv(os.path.join(out, "balance.csv"))[0][0], "covariate")

    def test_version(self):
        r = run("--version")
        self.assertEqual(r.returncode, 0)
        self.assertRegex(r.stdout.strip(), r"^\d+\.\d+\.\d+$")


if __name__ == "__main__":
    unittest.main(argv=[sys.argv[0], "-v"])
