"""Filter visualization by activation maximization, plus PPM image output.

Starting from seeded low-contrast noise, the input image is updated by plain
fixed-step gradient ascent on the mean of one filter's raw convolution output
map. Network parameters are frozen for the duration; only the input receives
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .arch import Network
from .errors import ShapeError
from .ops import filter_mean
from .tensor import Graph, Tensor, backward


@dataclass
class VizConfig:
    layer_index: int
    filter_index: int
    steps: int = 100
    step_size: float = 0.1
    seed: int = 0
    output_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.steps < 0:
            raise ShapeError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ShapeError(f"step_size must be positive, got {self.step_size}")
        h, w = self.output_size
        if h < 1 or w < 1:
            raise ShapeError(f"invalid output size {h}x{w}")


def _rescale01(image: np.ndarray) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi - lo < 1e-12:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def activation_maximize(
    net: Network,
    cfg: VizConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> Tensor:
    """Synthesize an input maximizing one filter's mean raw activation.

    Returns a [3, H, W] image min-max rescaled to [0, 1]. ``on_step`` (if
    given) receives (step, objective) once per ascent step, before the
    update. The network is untouched: parameter data, gradients, and batch
    norm buffers are bitwise identical afterwards.
    """
    if not (0 <= cfg.layer_index < net.num_conv_layers):
        raise ShapeError(
            f"layer index {cfg.layer_index} out of range [0, {net.num_conv_layers})"
        )
    h, w = cfg.output_size
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    x = Tensor(0.4 + 0.2 * rng.random((1, 3, h, w)), requires_grad=True)

    net.params.set_requires_grad(False)  # gradient flows to the input only
    try:
        probe = net.conv_activation(x, cfg.layer_index, mode="eval")
        if not (0 <= cfg.filter_index < probe.shape[1]):
            raise ShapeError(
                f"filter index {cfg.filter_index} out of range [0, {probe.shape[1]})"
            )
        for step in range(cfg.steps):
            graph = Graph()
            with graph:
                act = net.conv_activation(x, cfg.layer_index, mode="eval")
                objective = filter_mean(act, cfg.filter_index)
            backward(graph, objective)
            if on_step is not None:
                on_step(step, float(objective.data))
            x.data += cfg.step_size * x.grad
            x.grad = None
    finally:
        net.params.set_requires_grad(True)

    return Tensor(_rescale01(x.data[0]))


def write_ppm(image: Tensor, path) -> None:
    """Write a [3, H, W] image with values in [0, 1] as binary PPM (P6)."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W] image, got {list(image.shape)}")
    if image.data.min() < 0.0 or image.data.max() > 1.0:
        raise ShapeError("pixel values must lie in [0, 1]")
    _, h, w = image.shape
    payload = np.rint(image.data * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.transpose(1, 2, 0).tobytes())  # interleave to RGB triplets


def read_ppm(path) -> Tensor:
    """Read a binary PPM (P6) back into a [3, H, W] tensor of k/255 values."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    offset = 0
    while len(fields) < 4:
        while offset < len(blob) and blob[offset : offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(blob) and not blob[offset : offset + 1].isspace():
            offset += 1
        fields.append(blob[start:offset])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ShapeError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(fields[1]), int(fields[2])
    offset += 1  # single whitespace byte after the header
    pixels = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=offset)
    return Tensor(pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0)
