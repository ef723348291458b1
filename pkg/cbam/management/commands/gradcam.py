import json

from cbam.exceptions import ShapeMismatch
from cbam.management.base import CbamCommand
from cbam.services.gradcam import gradcam, write_heatmap
from cbam.services.logging import log_event
from cbam.services.serialization import read_tensor
from cbam.services.tensor import reshape
from cbam.services.zoo import load_checkpoint


class Command(CbamCommand):
    help = "Write the Grad-CAM heatmap of one image for one class (PGM, or a PPM overlay with --overlay)."

    def add_arguments(self, parser):
        parser.add_argument("--model", required=True, help="checkpoint directory written by train")
        parser.add_argument("--image", required=True, help="CBT1 image tensor, C×H×W or 1×C×H×W")
        parser.add_argument("--class", dest="class_idx", type=int, required=True, help="target class index")
        parser.add_argument("--out", required=True, help="output image path")
        parser.add_argument("--overlay", action="store_true", help="blend the map over the image as a P6 PPM")

    def handle(self, *args, **options):
        spec, params, _ = load_checkpoint(options["model"])
        image = read_tensor(options["image"])
        if image.ndim == 3:
            image = reshape(image, (1, *image.shape))
        if image.ndim != 4 or image.shape[0] != 1:
            raise ShapeMismatch(f"{options['image']}: expected C×H×W or 1×C×H×W, got {image.shape}")

        heatmap = gradcam(spec, params, image, options["class_idx"])
        write_heatmap(heatmap, options["out"], image if options["overlay"] else None)
        log_event("GradCam.Written", json.dumps({
            "out": options["out"], "class": heatmap.class_idx, "score": heatmap.score,
            "peak": list(heatmap.peak()), "overlay": options["overlay"]}))
        self.stdout.write(
            f"class {heatmap.class_idx} score {heatmap.score:.6f} peak {heatmap.peak()} -> {options['out']}")
