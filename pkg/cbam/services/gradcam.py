# cbam/services/gradcam.py
"""
Grad-CAM over the last block's output (after the residual add, before global pooling).

    α_c = mean over H×W of ∂logit[class] / ∂A_c
    map = relu(Σ_c α_c · A_c) / max(...)        (an all-zero map stays zero)
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from cbam.exceptions import ClassOutOfRange, ShapeMismatch
from cbam.services.serialization import encode_pgm, encode_ppm, read_netpbm, write_bytes
from cbam.services.tensor import GradTape, Tensor, backward, broadcast_mul, softmax, sum_all
from cbam.services.zoo import TinyNetSpec, net_forward

LAST_BLOCK_TAG = "blocks.last.output"


@dataclass(frozen=True)
class Heatmap:
    values: Tensor          # 1×1×H×W in [0, 1]
    layer: str
    class_idx: int
    score: float = float("nan")   # softmax probability of class_idx

    @property
    def pixels(self) -> np.ndarray:
        return self.values.data[0, 0]

    def peak(self) -> tuple:
        """(row, col) of the first maximal value in row-major order."""
        return tuple(int(i) for i in np.unravel_index(self.pixels.argmax(), self.pixels.shape))

    def peak_in_image(self, height: int, width: int) -> tuple:
        """Image pixel at the centre of the peak cell, for a map computed on a height×width input."""
        row, col = self.peak()
        h, w = self.pixels.shape
        return int((row + 0.5) * height // h), int((col + 0.5) * width // w)


def compute_gradcam(forward: Callable[[Tensor], tuple], image: Tensor, class_idx: int,
                    layer: str = LAST_BLOCK_TAG) -> Heatmap:
    """
    forward maps an image to (logits N×K, feature map A N×C×h×w). Gradients are taken
    of the pre-softmax logit of class_idx for the first sample.
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeMismatch(f"Grad-CAM takes one image of shape 1×C×H×W, got {image.shape}")
    with GradTape() as tape:
        x = tape.watch(image)
        logits, features = forward(x)
        num_classes = logits.shape[-1]
        if not 0 <= class_idx < num_classes:
            raise ClassOutOfRange(f"class {class_idx} outside [0, {num_classes})")
        selector = np.zeros(logits.shape)
        selector[0, class_idx] = 1.0
        score = sum_all(broadcast_mul(logits, Tensor._wrap(selector)))
    grads = backward(tape, score)
    d_features = grads[features.node_id].data[0]       # C×h×w
    activations = features.data[0]
    alpha = d_features.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)
    peak = raw.max()
    normalized = raw / peak if peak > 0 else np.zeros_like(raw)
    prob = float(softmax(logits.data[0])[class_idx])
    return Heatmap(values=Tensor._wrap(normalized[None, None]), layer=layer,
                   class_idx=class_idx, score=prob)


def gradcam(spec: TinyNetSpec, params: dict, image: Tensor, class_idx: int) -> Heatmap:
    if not 0 <= class_idx < spec.num_classes:
        raise ClassOutOfRange(f"class {class_idx} outside [0, {spec.num_classes})")
    return compute_gradcam(lambda x: net_forward(x, spec, params, return_features=True), image, class_idx)


# --- Rendering --------------------------------------------------------------
def to_bytes(h: Heatmap) -> np.ndarray:
    return np.rint(np.clip(h.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def upsample_nearest(values: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.arange(height) * values.shape[0] // height
    cols = np.arange(width) * values.shape[1] // width
    return values[rows[:, None], cols[None, :]]


def write_heatmap(h: Heatmap, path, image: Tensor = None, alpha: float = 0.5):
    """
    Write an 8-bit P5 PGM of round(255·h). With image (1×C0×H×W), write a P6 PPM instead:
    the min-max normalised image in grey, blended with the upsampled heatmap in red.
    """
    if image is None:
        write_bytes(path, encode_pgm(to_bytes(h)))
        return
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeMismatch(f"overlay image must be 1×C×H×W, got {image.shape}")
    grey = image.data[0].mean(axis=0)
    span = grey.max() - grey.min()
    grey = (grey - grey.min()) / span if span > 0 else np.zeros_like(grey)
    heat = upsample_nearest(np.clip(h.pixels, 0.0, 1.0), *grey.shape)
    rgb = np.repeat(grey[:, :, None], 3, axis=2) * (1.0 - alpha)
    rgb[:, :, 0] += alpha * heat
    write_bytes(path, encode_ppm(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0)))


def read_heatmap(path, layer: str = LAST_BLOCK_TAG, class_idx: int = -1) -> Heatmap:
    pixels = read_netpbm(path)
    if pixels.ndim != 2:
        raise ShapeMismatch(f"{path}: expected a greyscale PGM")
    return Heatmap(values=Tensor(pixels[None, None] / 255.0), layer=layer, class_idx=class_idx)
