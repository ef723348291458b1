import dataclasses
import json

from cbam.exceptions import DivergenceDetected
from cbam.management.base import CbamCommand
from cbam.services.ablation import load_run_config
from cbam.services.data import DatasetFormat, load_dataset, split_train_val
from cbam.services.logging import log_event
from cbam.services.training import evaluate, train
from cbam.services.zoo import count_params, init_params, save_checkpoint


class Command(CbamCommand):
    help = (
        "Train one network and write a checkpoint directory. The config JSON may hold "
        '"train" and "arch" sections; the remaining keys select the attention variant.'
    )

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="JSON run config")
        parser.add_argument("--data", required=True, help="training data (.cbds, or a synthetic spec JSON)")
        parser.add_argument("--out", required=True, help="checkpoint directory to write")
        parser.add_argument("--val", help="validation data; default holds out the tail of --data")
        parser.add_argument("--format", choices=[f.value for f in DatasetFormat], default=DatasetFormat.CBDS.value)
        parser.add_argument("--num-classes", type=int, help="class count (default: max label + 1)")

    def handle(self, *args, **options):
        run = load_run_config(options["config"])
        data = load_dataset(options["data"], options["format"], options["num_classes"])
        if options["val"]:
            val = load_dataset(options["val"], options["format"], data.num_classes)
        else:
            data, val = split_train_val(data)
        log_event("Data.Loaded", json.dumps({"train": len(data), "val": len(val), "classes": data.num_classes}))

        spec = run.variant.apply(run.arch).with_num_classes(data.num_classes)
        params = init_params(spec, run.train.seed)
        log_event("Train.Started", json.dumps({
            "variant": run.variant.name, "params": count_params(params), **run.train.to_dict()}))

        def on_epoch(m):
            log_event("Train.EpochCompleted", json.dumps(dataclasses.asdict(m)))
            self.stdout.write(
                f"epoch {m.epoch:3d}  lr {m.lr:.4g}  loss {m.train_loss:.6f}  val top-1 {m.val_top1_err:.2f}%")

        try:
            result = train(spec, params, data, run.train, val=val, on_epoch=on_epoch)
        except DivergenceDetected as exc:
            log_event("Train.Diverged", str(exc), "ERROR")
            raise

        scores = evaluate(spec, result.params, val)
        extra = {
            "variant": run.variant.to_dict(),
            "train": run.train.to_dict(),
            "initial_loss": result.initial_loss,
            "history": [dataclasses.asdict(m) for m in result.history],
            "val": dataclasses.asdict(scores),
        }
        manifest = save_checkpoint(options["out"], spec, result.params, extra)
        log_event("Checkpoint.Saved", str(manifest))
        log_event("Train.Finished", json.dumps({
            "final_train_loss": result.final_train_loss, "val_top1_err": scores.top1, "val_top5_err": scores.top5}))
        self.stdout.write(self.style.SUCCESS(
            f"saved {options['out']}: final loss {result.final_train_loss:.6f}, val top-1 {scores.top1:.2f}%"))
