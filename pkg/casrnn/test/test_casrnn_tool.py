import argparse
import contextlib
import io
import logging
import os
import subprocess
import sys
import tempfile
import unittest

import numpy as np

from casrnn import casrnn_tool, data
from casrnn.metrics import read_ppm


SYNTH = ["--synth-classes", "3", "--synth-bands", "8", "--synth-height", "12",
         "--synth-width", "12", "--train-per-class", "5"]
MODEL = ["--l", "2", "--hidden1", "4", "--hidden2", "4", "--epochs", "2",
         "--lr", "0.1", "--batch", "8"]


def read(filename):
    with open(filename, "rb") as f:
        return f.read()


class Tool(unittest.TestCase):
    def setUp(self):
        root = logging.getLogger()
        self.handlers = list(root.handlers)
        self.level = root.level
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def tearDown(self):
        root = logging.getLogger()
        for handler in list(root.handlers):
            if handler not in self.handlers:
                root.removeHandler(handler)
        root.setLevel(self.level)

    def path(self, *names):
        return os.path.join(self.tmp.name, *names)

    def run_tool(self, *args):
        stdout = io.StringIO()
        with contextlib.redirect_stdout(stdout):
            code = casrnn_tool.main(["-q"] + list(args))
        return code, stdout.getvalue()

    def test_pipeline(self):
        out = self.path("run")
        code, _ = self.run_tool("synth", "--output-dir", out, *SYNTH)
        self.assertEqual(code, 0)
        self.assertEqual(sorted(os.listdir(out)),
                         ["cube.hsc", "labels.hsl", "split.csv"])
        cube = data.load_cube(os.path.join(out, "cube.hsc"))
        self.assertEqual((cube.m, cube.n, cube.k), (12, 12, 8))
        split = data.load_split_csv(os.path.join(out, "split.csv"))
        self.assertEqual(len(split.train), 15)
        self.assertEqual(len(split.test), 144 - 15)

        code, _ = self.run_tool(
            "train", "--output-dir", out,
            "--cube", os.path.join(out, "cube.hsc"),
            "--labels", os.path.join(out, "labels.hsl"),
            "--split", os.path.join(out, "split.csv"), *MODEL)
        self.assertEqual(code, 0)
        for name in ("model.crnw", "train_log.csv", "config.txt",
                     "train.log"):
            self.assertTrue(os.path.isfile(os.path.join(out, name)), name)
        with open(os.path.join(out, "train_log.csv")) as f:
            self.assertEqual(len(f.read().splitlines()), 1 + 2)

        config_file = os.path.join(out, "config.txt")
        code, report = self.run_tool("eval", "--config", config_file)
        self.assertEqual(code, 0)
        self.assertTrue(report.startswith("OA    "))
        with open(os.path.join(out, "metrics.kv")) as f:
            keys = [line.split("=")[0] for line in f.read().splitlines()]
        self.assertEqual(keys[:3], ["oa", "aa", "kappa"])

        code, _ = self.run_tool("map", "--config", config_file,
                                "--mask-unlabeled")
        self.assertEqual(code, 0)
        image = read_ppm(os.path.join(out, "map.ppm"))
        self.assertEqual(image.shape, (12, 12, 3))

    def test_deterministic(self):
        outputs = []
        for run in ("a", "b"):
            out = self.path(run)
            code, _ = self.run_tool("synth", "--output-dir", out, *SYNTH)
            self.assertEqual(code, 0)
            args = ["--output-dir", out, "--variant", "cas-f",
                    "--cube", os.path.join(out, "cube.hsc"),
                    "--labels", os.path.join(out, "labels.hsl"),
                    "--split", os.path.join(out, "split.csv"), *MODEL]
            code, _ = self.run_tool("train", *args)
            self.assertEqual(code, 0)
            code, _ = self.run_tool("eval", *args)
            self.assertEqual(code, 0)
            outputs.append([read(os.path.join(out, name)) for name in
                            ("model.crnw", "split.csv", "metrics.kv")])
        self.assertEqual(outputs[0], outputs[1])

    def test_untrained_model_at_chance(self):
        oa = []
        for seed in range(10):
            args = ["--output-dir", self.path("chance", str(seed)),
                    "--seed", str(seed), *SYNTH, *MODEL, "--epochs", "0"]
            code, _ = self.run_tool("train", *args)
            self.assertEqual(code, 0)
            code, _ = self.run_tool("eval", *args)
            self.assertEqual(code, 0)
            with open(self.path("chance", str(seed), "metrics.kv")) as f:
                values = dict(line.split("=", 1)
                              for line in f.read().splitlines())
            oa.append(float(values["oa"]))
        self.assertAlmostEqual(np.mean(oa), 1/3, delta=0.15)

    def test_quiet_train(self):
        out = self.path("quiet")
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            code, _ = self.run_tool("train", "--output-dir", out,
                                    *(SYNTH + MODEL))
        self.assertEqual(code, 0)
        self.assertNotIn("INFO:", stderr.getvalue())
        self.assertEqual(logging.getLogger().level, logging.ERROR)
        with open(os.path.join(out, "train.log"), encoding="utf-8") as f:
            self.assertIn("INFO:casrnn.cascade:cascade epoch 0", f.read())

    def test_seed_changes_split(self):
        splits = []
        for seed in ("1", "2"):
            out = self.path(seed)
            self.run_tool("synth", "--output-dir", out, "--seed", seed,
                          *SYNTH)
            splits.append(read(os.path.join(out, "split.csv")))
        self.assertNotEqual(splits[0], splits[1])

    def test_spatial_variant(self):
        out = self.path("sscas")
        args = ["--output-dir", out, "--variant", "sscas",
                "--synth-kind", "spatial", "--patch", "5",
                "--conv-specs", "((2, 2, 2), (2, 2, 3))",
                "--stage-a", "1", "--stage-b", "1", "--stage-c", "1",
                *SYNTH, *MODEL]
        code, _ = self.run_tool("train", *args)
        self.assertEqual(code, 0)
        code, report = self.run_tool("eval", *args)
        self.assertEqual(code, 0)
        self.assertIn("Kappa", report)

    def test_sweep(self):
        out = self.path("sweep")
        code, _ = self.run_tool("sweep", "--output-dir", out,
                                "--grid-l", "2,4", "--grid-hidden1", "4",
                                "--grid-hidden2", "4", *(SYNTH + MODEL))
        self.assertEqual(code, 0)
        with open(os.path.join(out, "sweep.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "l,hidden1,hidden2,oa,aa,kappa,seconds")
        self.assertEqual([line.split(",")[:3] for line in lines[1:]],
                         [["2", "4", "4"], ["4", "4", "4"]])
        oa = float(lines[1].split(",")[3])
        self.assertTrue(0.0 <= oa <= 1.0)

    def test_configuration_errors(self):
        out = self.path("bad")
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            for args in (["--l", "zero"], ["--l", "0"],
                         ["--variant", "lstm"],
                         ["--train-counts", "[5, 5]"],
                         ["--patch", "9"]):
                with self.subTest(args=args):
                    code, _ = self.run_tool("train", "--output-dir", out,
                                            *(SYNTH + args))
                    self.assertEqual(code, 2)
        self.assertIn("configuration error: ", stderr.getvalue())
        self.assertFalse(os.path.exists(os.path.join(out, "model.crnw")))

    def test_missing_files(self):
        out = self.path("missing")
        code, _ = self.run_tool("eval", "--output-dir", out, *SYNTH)
        self.assertEqual(code, 1)
        code, _ = self.run_tool("train", "--output-dir", out,
                                "--cube", self.path("nope.hsc"),
                                "--labels", self.path("nope.hsl"))
        self.assertEqual(code, 1)

    def test_int_list(self):
        self.assertEqual(casrnn_tool.int_list("2,4, 8"), [2, 4, 8])
        for text in ("", "2,x", "0,2"):
            with self.subTest(text=text):
                with self.assertRaises(argparse.ArgumentTypeError):
                    casrnn_tool.int_list(text)

    def test_subprocess(self):
        out = self.path("proc")
        proc = subprocess.run(
            [sys.executable, "-m", "casrnn.casrnn_tool", "synth",
             "--output-dir", out] + SYNTH,
            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        self.assertEqual(proc.returncode, 0, proc.stderr)
        self.assertTrue(os.path.isfile(os.path.join(out, "cube.hsc")))
        proc = subprocess.run(
            [sys.executable, "-m", "casrnn.casrnn_tool", "train",
             "--output-dir", out, "--hidden3", "4"],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        self.assertEqual(proc.returncode, 2)
        labels = data.load_labels(os.path.join(out, "labels.hsl"))
        np.testing.assert_array_equal(np.unique(labels.labels), [1, 2, 3])
