import io
import json
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest import mock

from django.core.management import call_command, execute_from_command_line, get_commands
from django.core.management.base import CommandError
from django.db import OperationalError
from django.test import TestCase, override_settings

from cbam.models import AblationResult, LogEntry
from cbam.services.data import load_dataset
from cbam.services.serialization import read_netpbm, write_tensor
from cbam.services.tensor import Tensor
from cbam.services.zoo import load_checkpoint

TINY_ARCH = {
    "in_channels": 1,
    "stem_channels": 4,
    "blocks": [{"in_channels": 4, "out_channels": 4, "stride": 1}],
    "num_classes": 2,
}
SYNTH = {"num_samples": 24, "num_classes": 2, "channels": 1, "height": 6, "width": 6, "patch_size": 2, "seed": 3}


def run_cli(*argv):
    """Run manage.py argv; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    code = 0
    with redirect_stdout(out), redirect_stderr(err):
        try:
            execute_from_command_line(["manage.py", *argv])
        except SystemExit as exc:
            code = exc.code
    return code, out.getvalue(), err.getvalue()


@override_settings(CBAM_SEED=None, CBAM_PERSIST_LOGS=True)
class CommandTestCase(TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.spec_path = self.tmp / "synth.json"
        self.spec_path.write_text(json.dumps(SYNTH))
        self.config_path = self.tmp / "run.json"
        self.config_path.write_text(json.dumps({
            "train": {"epochs": 1, "batch_size": 8, "lr0": 0.05},
            "arch": TINY_ARCH,
            "kernel_size": 3,
            "reduction_ratio": 2,
        }))
        self.data_path = self.tmp / "train.cbds"

    def tearDown(self):
        self._tmp.cleanup()

    def call(self, name, **options):
        out = io.StringIO()
        call_command(name, stdout=out, **options)
        return out.getvalue()

    def gen_data(self):
        return self.call("gen-data", spec=str(self.spec_path), out=str(self.data_path))


class GenDataCommandTests(CommandTestCase):
    def test_writes_dataset_and_logs(self):
        output = self.gen_data()
        self.assertIn("wrote 24 samples", output)
        self.assertEqual(len(load_dataset(self.data_path)), 24)
        self.assertTrue(LogEntry.objects.filter(action="Data.Generated").exists())

    def test_unknown_spec_key_exits_one(self):
        self.spec_path.write_text('{"pixels": 3}')
        with self.assertRaises(CommandError) as ctx:
            self.gen_data()
        self.assertEqual(ctx.exception.returncode, 1)


class TrainAndGradCamCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.gen_data()
        self.ckpt = self.tmp / "ckpt"
        self.call("train", config=str(self.config_path), data=str(self.data_path), out=str(self.ckpt),
                  num_classes=2)
        data = load_dataset(self.data_path)
        self.image_path = self.tmp / "image.cbt"
        write_tensor(Tensor(data.images.data[0]), self.image_path)

    def test_checkpoint_is_written(self):
        spec, params, manifest = load_checkpoint(self.ckpt)
        self.assertEqual(spec.num_classes, 2)
        self.assertEqual(len(manifest["extra"]["history"]), 1)
        actions = set(LogEntry.objects.values_list("action", flat=True))
        self.assertTrue({"Train.Started", "Train.EpochCompleted", "Checkpoint.Saved", "Train.Finished"} <= actions)

    def test_gradcam_writes_pgm(self):
        output = self.call("gradcam", model=str(self.ckpt), image=str(self.image_path), class_idx=1,
                           out=str(self.tmp / "cam.pgm"))
        self.assertIn("score", output)
        self.assertEqual(read_netpbm(self.tmp / "cam.pgm").shape, (6, 6))

    def test_gradcam_overlay(self):
        self.call("gradcam", model=str(self.ckpt), image=str(self.image_path), class_idx=0,
                  out=str(self.tmp / "cam.ppm"), overlay=True)
        self.assertEqual(read_netpbm(self.tmp / "cam.ppm").shape, (6, 6, 3))

    def test_gradcam_class_out_of_range_exits_one(self):
        code, _, err = run_cli("gradcam", "--model", str(self.ckpt), "--image", str(self.image_path),
                               "--class", "2", "--out", str(self.tmp / "cam.pgm"))
        self.assertEqual(code, 1)
        self.assertIn("ClassOutOfRange", err)


class AblateCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.gen_data()
        self.ablate_config = self.tmp / "ablate.json"
        self.ablate_config.write_text(json.dumps({"train": {"epochs": 1, "batch_size": 8}, "arch": TINY_ARCH}))

    def ablate(self, out):
        return self.call("ablate", matrix="channel", data=str(self.data_path), out=str(out), seeds=2,
                         config=str(self.ablate_config))

    def test_report_files_and_rows(self):
        out = self.tmp / "report.csv"
        self.ablate(out)
        lines = out.read_text().splitlines()
        self.assertEqual(len(lines), 1 + 4 * 2)
        self.assertEqual(len(json.loads((self.tmp / "report.json").read_text())), 8)
        summary = json.loads((self.tmp / "report.csv.summary.json").read_text())
        self.assertEqual([v["variant"] for v in summary["variants"]],
                         ["baseline", "se", "channel_max", "channel_avg_max"])
        stored = [r.to_row() for r in AblationResult.objects.filter(report_path=str(out))]
        self.assertEqual(stored, json.loads((self.tmp / "report.json").read_text()))

    def test_repeated_runs_are_byte_identical(self):
        self.ablate(self.tmp / "a.csv")
        self.ablate(self.tmp / "b.csv")
        self.assertEqual((self.tmp / "a.csv").read_bytes(), (self.tmp / "b.csv").read_bytes())

    @override_settings(CBAM_PERSIST_LOGS=False)
    def test_report_without_persistence(self):
        out = self.tmp / "report.csv"
        self.ablate(out)
        self.assertFalse(AblationResult.objects.exists())
        self.assertTrue((self.tmp / "report.csv.summary.json").exists())

    def test_missing_results_table_does_not_abort(self):
        out = self.tmp / "report.csv"
        with mock.patch("cbam.services.logging.AblationResult") as model:
            model.objects.bulk_create.side_effect = OperationalError("no such table: cbam_ablationresult")
            self.ablate(out)
        self.assertTrue(model.objects.bulk_create.called)
        self.assertEqual(len(out.read_text().splitlines()), 1 + 4 * 2)
        self.assertTrue((self.tmp / "report.csv.summary.json").exists())

    def test_wall_timing_records_seconds(self):
        out = self.tmp / "wall.csv"
        self.call("ablate", matrix="channel", data=str(self.data_path), out=str(out), seeds=1,
                  config=str(self.ablate_config), timing="wall")
        rows = json.loads((self.tmp / "wall.json").read_text())
        self.assertTrue(all(row["seconds"] > 0 for row in rows))

    def test_unknown_matrix_exits_one(self):
        with self.assertRaises(CommandError) as ctx:
            self.call("ablate", matrix=str(self.tmp / "missing.json"), data=str(self.data_path),
                      out=str(self.tmp / "r.csv"))
        self.assertEqual(ctx.exception.returncode, 1)


class CheckGradCommandTests(CommandTestCase):
    def test_sigmoid_passes(self):
        code, out, _ = run_cli("check-grad", "--op", "sigmoid", "--trials", "20")
        self.assertEqual(code, 0)
        self.assertIn("sigmoid", out)
        self.assertTrue(LogEntry.objects.filter(action="GradCheck.OpChecked").exists())

    def test_full_block_passes(self):
        code, out, _ = run_cli("check-grad", "--full-block", "--trials", "2")
        self.assertEqual(code, 0)
        self.assertIn("cbam_parallel", out)
        self.assertIn("residual_block", out)

    def test_violation_exits_two(self):
        with mock.patch("cbam.services.gradcheck.relative_error", return_value=1.0):
            code, _, err = run_cli("check-grad", "--op", "relu", "--trials", "1")
        self.assertEqual(code, 2)
        self.assertIn("GradientMismatch", err)
        self.assertTrue(LogEntry.objects.filter(action="GradCheck.Violation", level="ERROR").exists())


class UsageTests(CommandTestCase):
    def test_commands_use_hyphenated_names(self):
        commands = get_commands()
        for name in ["train", "ablate", "check-grad", "gradcam", "gen-data"]:
            self.assertEqual(commands.get(name), "cbam", name)
        self.assertNotIn("check_grad", commands)

    def test_help_exits_zero_and_lists_flags(self):
        for name, flag in [("train", "--config"), ("ablate", "--seeds"), ("check-grad", "--full-block"),
                           ("gradcam", "--overlay"), ("gen-data", "--spec")]:
            code, out, _ = run_cli(name, "--help")
            self.assertEqual(code, 0, name)
            self.assertIn(flag, out)

    def test_unknown_flag_exits_one_and_names_it(self):
        code, _, err = run_cli("check-grad", "--bogus")
        self.assertEqual(code, 1)
        self.assertIn("--bogus", err)

    def test_missing_required_flag_exits_one(self):
        code, _, err = run_cli("gen-data", "--out", str(self.tmp / "x.cbds"))
        self.assertEqual(code, 1)
        self.assertIn("--spec", err)

    def test_op_and_full_block_are_exclusive(self):
        code, _, _ = run_cli("check-grad", "--op", "relu", "--full-block")
        self.assertEqual(code, 1)
