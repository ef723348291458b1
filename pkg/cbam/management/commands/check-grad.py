import json

from django.conf import settings

from cbam.management.base import CbamCommand
from cbam.services.gradcheck import CASES, assert_gradients, run_gradcheck, select_cases
from cbam.services.logging import log_event


class Command(CbamCommand):
    help = (
        "Compare tape gradients with central finite differences. Checks every op by default, "
        "one op with --op, or the composed CBAM and residual blocks with --full-block. "
        "Exits 2 when any relative error reaches --tol."
    )

    def add_arguments(self, parser):
        target = parser.add_mutually_exclusive_group()
        target.add_argument("--op", choices=list(CASES), help="check a single op")
        target.add_argument("--full-block", action="store_true", help="check composed attention and residual blocks")
        parser.add_argument("--trials", type=int, default=settings.CBAM_GRADCHECK_TRIALS)
        parser.add_argument("--tol", type=float, default=settings.CBAM_GRADCHECK_TOL)
        parser.add_argument("--eps", type=float, default=settings.CBAM_GRADCHECK_EPS)
        parser.add_argument("--seed", type=int, default=0)

    def handle(self, *args, **options):
        cases = select_cases(options["op"], options["full_block"])

        def on_result(r):
            log_event("GradCheck.OpChecked", json.dumps(r.to_dict()))
            if not r.passed:
                log_event("GradCheck.Violation", json.dumps(r.to_dict()), "ERROR")
            status = "ok" if r.passed else "FAIL"
            self.stdout.write(f"{r.op:<34} {r.trials:3d} trials  max rel err {r.max_rel_error:.3e}  {status}")

        results = run_gradcheck(cases, options["trials"], options["tol"], options["eps"], options["seed"], on_result)
        assert_gradients(results)
        self.stdout.write(self.style.SUCCESS(f"{len(results)} op(s) within tolerance {options['tol']:g}"))
