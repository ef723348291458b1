import dataclasses
import json
import time
from pathlib import Path

from django.conf import settings

from cbam.exceptions import ConfigError
from cbam.management.base import CbamCommand
from cbam.services.ablation import load_matrix, load_run_config, ordering_check, run_ablation
from cbam.services.data import DatasetFormat, load_dataset
from cbam.services.logging import log_event, record_ablation_rows
from cbam.services.serialization import write_json
from cbam.services.training import effective_seed
from cbam.services.zoo import net_macs


class Command(CbamCommand):
    help = (
        "Train every variant of an ablation matrix once per seed. Writes the CSV report, "
        "its JSON mirror and <out>.summary.json with seed means and ordering checks."
    )

    def add_arguments(self, parser):
        parser.add_argument("--matrix", required=True,
                            help="variants JSON, or one of: channel, spatial, arrangement, all")
        parser.add_argument("--data", required=True, help="training data (.cbds, or a synthetic spec JSON)")
        parser.add_argument("--out", required=True, help="CSV report path")
        parser.add_argument("--seeds", type=int, default=1, help="number of seeds per variant")
        parser.add_argument("--first-seed", type=int, default=0, help="seeds run first-seed .. first-seed+n-1")
        parser.add_argument("--jobs", type=int, default=settings.CBAM_ABLATION_JOBS, help="worker threads")
        parser.add_argument("--config", help='JSON with optional "train" and "arch" sections')
        parser.add_argument("--val", help="validation data; default holds out the tail of --data")
        parser.add_argument("--format", choices=[f.value for f in DatasetFormat], default=DatasetFormat.CBDS.value)
        parser.add_argument("--num-classes", type=int, help="class count (default: max label + 1)")
        parser.add_argument("--json", help="JSON mirror path (default: --out with a .json suffix)")
        parser.add_argument("--timing", choices=["off", "wall"], default="off",
                            help="'wall' records per-run seconds, which makes repeated reports differ; "
                                 "the default 'off' writes 0 so identical runs give identical bytes")

    def handle(self, *args, **options):
        if options["seeds"] < 1 or options["jobs"] < 1:
            raise ConfigError("--seeds and --jobs must be at least 1")
        variants = load_matrix(options["matrix"])
        run = load_run_config(options["config"], with_variant=False)
        data = load_dataset(options["data"], options["format"], options["num_classes"])
        val = load_dataset(options["val"], options["format"], data.num_classes) if options["val"] else None
        first = effective_seed(options["first_seed"])
        seeds = list(range(first, first + options["seeds"]))

        def on_row(row):
            log_event("Ablation.VariantFinished", json.dumps(dataclasses.asdict(row)))
            self.stdout.write(
                f"{row.variant:<36} seed {row.seed}  params {row.params:>8}  val top-1 {row.val_top1_err:6.2f}%")

        report = run_ablation(
            variants, data, run.train, seeds, arch=run.arch, val=val, jobs=options["jobs"],
            clock=time.perf_counter if options["timing"] == "wall" else None, on_row=on_row,
        )

        out = Path(options["out"])
        json_path = Path(options["json"]) if options["json"] else out.with_suffix(".json")
        report.write(out, json_path)
        record_ablation_rows(report.rows, out)

        checks = ordering_check(report)
        for check in checks:
            log_event("Ablation.OrderingCheck", json.dumps(check.to_dict()), "INFO" if check.passed else "WARN")
        height, width = data.image_shape[1:]
        arch = run.arch.with_num_classes(data.num_classes)
        summary = {
            "variants": json.loads(report.summary().to_json(orient="records")),
            "macs": {v.name: net_macs(v.apply(arch), height, width) for v in variants},
            "ordering_checks": [check.to_dict() for check in checks],
        }
        write_json(f"{out}.summary.json", summary)
        log_event("Ablation.ReportWritten", json.dumps({"csv": str(out), "json": str(json_path), "rows": len(report.rows)}))
        self.stdout.write(self.style.SUCCESS(f"wrote {len(report.rows)} rows to {out}"))
