import csv
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from ppgm.config import parse_experiment_config
from ppgm.core import ConstraintKind
from ppgm.errors import SpecificationError, UsageError
from ppgm.experiments import reporting
from ppgm.experiments.builtins import (
    cosine_optimal_value,
    generate_random_spec,
    inline_spec,
    load_builtin,
    spec_to_dict,
)
from ppgm.experiments.runner import evaluate_checkpoint, resolve_ppgm_config, resolve_problem, run_experiment
from ppgm.lqpgm import IterateHistory, IterateRecord
from ppgm.montecarlo import EstimateWithError

TINY_PPGM = {"bsde_steps": 2, "control_steps": 2, "outer_max": 2, "batch": 8, "time_steps": 5}
SMALL_EVALUATION = {"x_min": -1.0, "x_max": 1.0, "x_points": 3, "eval_steps": 10, "eval_paths": 50}


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


class TestBuiltins(unittest.TestCase):
    def test_dimensions(self):
        self.assertEqual((load_builtin("std-lq").n, load_builtin("std-lq").m), (2, 3))
        self.assertEqual((load_builtin("singular-lq").n, load_builtin("singular-lq").m), (2, 2))
        self.assertEqual((load_builtin("nonconvex-lq").n, load_builtin("nonconvex-lq").m), (1, 5))
        self.assertEqual((load_builtin("cosine-cost").n, load_builtin("cosine-cost").m), (3, 3))

    def test_cone_problem_shares_data_with_nonconvex_problem(self):
        cone, plain = load_builtin("cone-lq"), load_builtin("nonconvex-lq")
        self.assertIs(cone.spec.constraint.kind, ConstraintKind.POSITIVE_CONE)
        np.testing.assert_array_equal(cone.spec.R.at(0), plain.spec.R.at(0))

    def test_builtins_start_at_ones(self):
        np.testing.assert_array_equal(load_builtin("std-lq").spec.x0, np.ones(2))

    def test_unknown_builtin(self):
        with self.assertRaises(SpecificationError):
            load_builtin("mystery")

    def test_cosine_problem_is_not_linear_quadratic(self):
        bundle = load_builtin("cosine-cost")
        self.assertFalse(bundle.is_lq)
        self.assertEqual(cosine_optimal_value(np.ones(3))[0], -3.0 + 1.5)

    def test_random_spec_is_seeded(self):
        a, b = generate_random_spec(3, 4), generate_random_spec(3, 4)
        np.testing.assert_array_equal(a.A.at(0), b.A.at(0))
        self.assertEqual(a.name, "random-n3-s4")
        np.testing.assert_allclose(a.R.at(0), a.R.at(0).T)

    def test_random_spec_needs_positive_dimension(self):
        with self.assertRaises(SpecificationError):
            generate_random_spec(0, 0)

    def test_spec_dict_rebuilds_the_same_problem(self):
        # Arrange
        spec = load_builtin("nonconvex-lq").spec
        data = {**spec_to_dict(spec), "constraint": "free"}

        # Act
        config = parse_experiment_config({"problem": {"inline": data}, "method": "riccati"})
        rebuilt = inline_spec(config.problem.inline, steps=spec.grid.N).spec

        # Assert
        for name in ("A", "B", "C", "D", "Q", "R", "S"):
            np.testing.assert_array_equal(getattr(rebuilt, name).at(0), getattr(spec, name).at(0))
        np.testing.assert_array_equal(rebuilt.G, spec.G)


class TestReporting(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_format_number(self):
        self.assertEqual(reporting.format_number(None), "")
        self.assertEqual(reporting.format_number(float("nan")), "")
        self.assertEqual(reporting.format_number(0.1), "0.1")
        self.assertEqual(reporting.format_number(3), "3")

    def test_value_curve_with_estimates(self):
        # Arrange
        estimates = [EstimateWithError(mean=1.5, stderr=0.25, M=10), EstimateWithError(mean=2.0, stderr=0.5, M=10)]

        # Act
        path = reporting.write_value_curve(self.dir / "value0.csv", [0.0, 1.0], estimates, [1.0, 2.0])

        # Assert
        rows = _read_csv(path)
        self.assertEqual(rows[1], {"x": "1", "value": "2", "value_stderr": "0.5", "reference": "2"})

    def test_exact_value_curve_leaves_stderr_blank(self):
        path = reporting.write_value_curve(self.dir / "value0.csv", [0.0], [0.75])
        self.assertEqual(path.read_text(encoding="utf-8"), "x,value,value_stderr,reference\n0,0.75,,\n")

    def test_convergence_plot_has_one_line_per_series(self):
        # Arrange
        history = IterateHistory()
        for k, delta in enumerate((1.0, 0.1, 0.01), start=1):
            history.append(IterateRecord(k=k, delta_k=delta, control_err=delta / 2))

        # Act
        svg = reporting.render_convergence_svg(history, "std-lq <run>")

        # Assert
        self.assertTrue(svg.lstrip().startswith("<svg"))
        self.assertEqual(svg.count("<polyline"), 2)
        self.assertIn("std-lq &lt;run&gt;", svg)


class TestResolveConfig(unittest.TestCase):
    def test_builtin_overrides_yield_to_explicit_fields(self):
        # Arrange
        config = parse_experiment_config(
            {"problem": {"builtin": "singular-lq"}, "method": "ppgm", "ppgm": {"batch": 7}, "seed": 3}
        )

        # Act
        resolved = resolve_ppgm_config(config, resolve_problem(config))

        # Assert
        self.assertEqual(resolved.batch, 7)
        self.assertEqual(resolved.bsde_steps, 10)
        self.assertEqual(resolved.control_rate, 0.002)
        self.assertEqual(resolved.optimizer, "adam")
        self.assertEqual(resolved.seed, 3)

    def test_inline_problems_keep_plain_descent(self):
        inline = {"A": 0, "B": 1, "C": 0, "D": 0, "Q": 1, "R": 1, "S": 0, "G": 1, "x0": 1}
        config = parse_experiment_config({"problem": {"inline": inline}, "method": "ppgm"})
        self.assertEqual(resolve_ppgm_config(config, resolve_problem(config)).optimizer, "sgd")


class TestRunExperiment(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.settings = {"output_dir": str(self.dir), "log_level": "info", "sweep_workers": 1, "record_timing": False}

    def tearDown(self):
        self.tmp.cleanup()

    def _config(self, **overrides):
        data = {"problem": {"builtin": "std-lq"}, "method": "lq-pgm", "lq": {"tau": 0.5}, "evaluation": SMALL_EVALUATION}
        data.update(overrides)
        return parse_experiment_config(data)

    def test_lq_pgm_run_writes_artifacts(self):
        # Act
        outcome = run_experiment(self._config(), self.settings)

        # Assert
        self.assertTrue(outcome.converged)
        self.assertEqual(outcome.out_dir, self.dir / "std-lq-lq-pgm")
        history = (outcome.out_dir / "history.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(history[0], "iter,delta_k,control_err,value_err,bsde_loss,control_loss,wall_ms")
        self.assertEqual(len(history) - 1, len(outcome.history))
        summary = json.loads((outcome.out_dir / "summary.json").read_text(encoding="utf-8"))
        self.assertTrue(summary["converged"])
        self.assertEqual(summary["iterations"], len(outcome.history))
        self.assertEqual(summary["assumptions"]["case"], "standard")
        self.assertLessEqual(summary["final"]["control_err"], 1e-3)
        values = _read_csv(outcome.out_dir / "value0.csv")
        self.assertEqual(len(values), 3)
        for row in values:
            self.assertAlmostEqual(float(row["value"]), float(row["reference"]), delta=1e-2 * (1 + abs(float(row["reference"]))))
        self.assertFalse((outcome.out_dir / "convergence.svg").exists())

    def test_repeated_run_gives_identical_files(self):
        first = run_experiment(self._config(lq={"tau": 0.5, "kmax": 5}), self.settings)
        history_bytes = (first.out_dir / "history.csv").read_bytes()
        values_bytes = (first.out_dir / "value0.csv").read_bytes()
        summary_bytes = (first.out_dir / "summary.json").read_bytes()
        second = run_experiment(self._config(lq={"tau": 0.5, "kmax": 5}), self.settings)
        self.assertEqual((second.out_dir / "history.csv").read_bytes(), history_bytes)
        self.assertEqual((second.out_dir / "value0.csv").read_bytes(), values_bytes)
        self.assertEqual((second.out_dir / "summary.json").read_bytes(), summary_bytes)
        self.assertIsNone(second.manifest["wall_seconds"])

    def test_wall_time_recorded_on_request(self):
        # Arrange
        settings = {**self.settings, "record_timing": True}

        # Act
        outcome = run_experiment(self._config(lq={"tau": 0.5, "kmax": 2}), settings)

        # Assert
        summary = json.loads((outcome.out_dir / "summary.json").read_text(encoding="utf-8"))
        self.assertGreaterEqual(summary["wall_seconds"], 0.0)
        history = _read_csv(outcome.out_dir / "history.csv")
        self.assertTrue(all(row["wall_ms"] for row in history))

    def test_plot_written_on_request(self):
        outcome = run_experiment(self._config(lq={"tau": 0.5, "kmax": 3}, plots=True), self.settings)
        self.assertFalse(outcome.converged)
        self.assertIn("<polyline", (outcome.out_dir / "convergence.svg").read_text(encoding="utf-8"))

    def test_riccati_run_has_empty_history(self):
        outcome = run_experiment(self._config(method="riccati"), self.settings)
        self.assertTrue(outcome.converged)
        self.assertEqual(len(outcome.history), 0)
        self.assertIn("value_at_x0", outcome.manifest["details"])

    def test_method_and_problem_mismatches(self):
        with self.assertRaises(UsageError):
            run_experiment(self._config(problem={"builtin": "cone-lq"}), self.settings)
        with self.assertRaises(UsageError):
            run_experiment(self._config(problem={"builtin": "cosine-cost"}, method="riccati"), self.settings)
        with self.assertRaises(UsageError):
            run_experiment(self._config(method="cone-reference"), self.settings)

    def test_cone_reference_not_below_unconstrained_value(self):
        # Act
        outcome = run_experiment(
            self._config(problem={"builtin": "cone-lq"}, method="cone-reference", evaluation={"x_points": 11}),
            self.settings,
        )

        # Assert
        rows = _read_csv(outcome.out_dir / "value0.csv")
        self.assertEqual(len(rows), 11)
        for row in rows:
            value, reference = float(row["value"]), float(row["reference"])
            self.assertGreaterEqual(value, reference - 1e-6 * (1 + abs(reference)))

    def test_deep_run_and_checkpoint_evaluation(self):
        # Arrange
        config = self._config(method="ppgm", ppgm=TINY_PPGM)

        # Act
        outcome = run_experiment(config, self.settings)
        checkpoint = outcome.out_dir / "checkpoint.npz"
        evaluated = evaluate_checkpoint(config, checkpoint, self.settings)

        # Assert
        self.assertTrue(checkpoint.exists())
        self.assertEqual(outcome.manifest["details"]["final_k"], 2)
        self.assertEqual(len(_read_csv(outcome.out_dir / "history.csv")), 2)
        report = json.loads((evaluated.out_dir / "evaluation.json").read_text(encoding="utf-8"))
        self.assertEqual(report["k"], 2)
        self.assertGreaterEqual(report["control_err"], 0.0)
        rows = _read_csv(evaluated.out_dir / "value0.csv")
        self.assertTrue(all(row["value_stderr"] != "" for row in rows))

    def test_deep_run_resumes_from_checkpoint(self):
        config = self._config(method="ppgm", ppgm={**TINY_PPGM, "outer_max": 1})
        first = run_experiment(config, self.settings)
        resumed = run_experiment(config, self.settings, checkpoint=first.out_dir / "checkpoint.npz")
        self.assertEqual(resumed.history.records[0].k, 2)
        self.assertEqual(resumed.manifest["details"]["final_k"], 2)
