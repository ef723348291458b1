import os
from unittest import skipUnless

from django.test import SimpleTestCase

from cbam.exceptions import ConfigError, GradientMismatch
from cbam.services.gradcheck import CASES, CheckResult, assert_gradients, run_gradcheck, select_cases


class SelectionTests(SimpleTestCase):
    def test_full_block_covers_every_arrangement_and_the_residual_block(self):
        names = [case.name for case in select_cases(full_block=True)]
        self.assertEqual(names, ["cbam_channel_then_spatial", "cbam_spatial_then_channel", "cbam_parallel",
                                 "cbam_channel_only", "residual_block"])

    def test_default_is_every_case(self):
        self.assertEqual(len(select_cases()), len(CASES))

    def test_bad_selection(self):
        with self.assertRaises(ConfigError):
            select_cases("softplus")
        with self.assertRaises(ConfigError):
            select_cases("relu", full_block=True)
        with self.assertRaises(ConfigError):
            run_gradcheck(select_cases("relu"), trials=0)


class AuditTests(SimpleTestCase):
    def test_every_case_passes_a_short_audit(self):
        results = run_gradcheck(select_cases(), trials=2, seed=1)
        failed = [r.to_dict() for r in results if not r.passed]
        self.assertEqual(failed, [])

    def test_results_arrive_in_order(self):
        seen = []
        run_gradcheck(select_cases("sigmoid"), trials=3, on_result=seen.append)
        self.assertEqual([r.op for r in seen], ["sigmoid"])
        self.assertEqual(seen[0].trials, 3)

    def test_violations_raise(self):
        assert_gradients([CheckResult("relu", 20, 1e-9, "x", 1e-4)])
        with self.assertRaises(GradientMismatch):
            assert_gradients([CheckResult("relu", 20, 1e-9, "x", 1e-4), CheckResult("conv2d_k3", 20, 3e-3, "kernel", 1e-4)])


@skipUnless(os.environ.get("CBAM_SLOW_TESTS") == "1", "set CBAM_SLOW_TESTS=1 for the 20-trial audit")
class FullAuditTests(SimpleTestCase):
    def test_every_case_passes_twenty_trials(self):
        results = run_gradcheck(select_cases(), trials=20)
        assert_gradients(results)
