import json

from cbam.management.base import CbamCommand
from cbam.services.data import SyntheticSpec, generate_synthetic, save_dataset
from cbam.services.logging import log_event
from cbam.services.serialization import read_json


class Command(CbamCommand):
    help = "Generate a synthetic locate-the-patch dataset and write it as CBDS."

    def add_arguments(self, parser):
        parser.add_argument("--spec", required=True, help="JSON synthetic dataset spec")
        parser.add_argument("--out", required=True, help="output .cbds path")

    def handle(self, *args, **options):
        spec = SyntheticSpec.from_dict(read_json(options["spec"]))
        data = generate_synthetic(spec)
        save_dataset(data, options["out"])
        log_event("Data.Generated", json.dumps({"out": options["out"], **spec.to_dict()}))
        self.stdout.write(f"wrote {len(data)} samples, {data.num_classes} classes to {options['out']}")
