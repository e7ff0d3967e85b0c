"""Builders for the reconstruction and classification heads.

Every head starts with the same two layers: a measurement layer reading a
prefix of the sensing matrix and a decode layer tied to its pseudoinverse.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError
from .nn import (Conv2d, Dense, MaxPool2, Measurement, Network, PinvDecode, ReLU, Reshape,
                 forward_pass)
from .sensing import MeasurementMatrix

HEADS = ("reconnet", "autoencoder", "classifier")


@dataclass
class ModelSpec:
    """Everything needed to rebuild a head; stored in checkpoints."""

    head: str = "autoencoder"
    b: int = 33
    num_classes: int = 10
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {HEADS}")

    @property
    def loss(self) -> str:
        return "cross-entropy" if self.head == "classifier" else "euclidean"

    def to_dict(self):
        return asdict(self)


def _n_of(phi, b):
    n = phi.n if isinstance(phi, MeasurementMatrix) else int(np.asarray(phi).shape[1])
    if b * b != n:
        raise DimensionError(f"block side {b} gives {b * b} pixels, measurement matrix has n={n}")
    return n


def _m_of(phi):
    return phi.m_max if isinstance(phi, MeasurementMatrix) else int(np.asarray(phi).shape[0])


def _front(n):
    return [Measurement("measure", n), PinvDecode("decode", n)]


def build_autoencoder(b: int, phi, hidden: int | None = None) -> Network:
    """Pseudo-image -> FC(n, m) + ReLU -> FC(m, n), reshaped to the block."""
    n = _n_of(phi, b)
    m = hidden or _m_of(phi)
    layers = _front(n) + [
        Dense("fc1", n, m), ReLU("relu1"),
        Dense("fc2", m, n),
        Reshape("out", (b, b)),
    ]
    return Network(layers, (b, b), head="autoencoder", meta={"b": b, "hidden": m})


def build_reconnet(b: int, phi, widths=(64, 32), kernels=(11, 1, 7), units: int = 2) -> Network:
    """Pseudo-image followed by ``units`` three-conv refinement units.

    Each unit is conv(k0, w0) -> conv(k1, w1) -> conv(k2, 1), every conv
    followed by ReLU except the very last one. ``units=0`` leaves only the
    pseudo-image.
    """
    n = _n_of(phi, b)
    layers = _front(n) + [Reshape("to_image", (1, b, b))]
    for u in range(1, units + 1):
        chans = [1, widths[0], widths[1], 1]
        for j in range(3):
            layers.append(Conv2d(f"unit{u}.conv{j + 1}", chans[j], chans[j + 1], kernels[j]))
            if not (u == units and j == 2):
                layers.append(ReLU(f"unit{u}.relu{j + 1}"))
    layers.append(Reshape("out", (b, b)))
    return Network(layers, (b, b), head="reconnet",
                   meta={"b": b, "widths": list(widths), "kernels": list(kernels), "units": units})


def build_classifier(b: int, phi, num_classes: int = 10, channels=(8, 16), kernel: int = 5,
                     hidden: int = 64) -> Network:
    """Reduced LeNet on the pseudo-image: two conv/pool stages and two FC layers."""
    n = _n_of(phi, b)
    if b % 4:
        raise DimensionError(f"classifier needs block side divisible by 4, got {b}")
    flat = channels[1] * (b // 4) ** 2
    layers = _front(n) + [
        Reshape("to_image", (1, b, b)),
        Conv2d("conv1", 1, channels[0], kernel), ReLU("relu1"), MaxPool2("pool1"),
        Conv2d("conv2", channels[0], channels[1], kernel), ReLU("relu2"), MaxPool2("pool2"),
        Reshape("flatten", (flat,)),
        Dense("fc1", flat, hidden), ReLU("relu3"),
        Dense("fc2", hidden, num_classes),
    ]
    return Network(layers, (b, b), head="classifier",
                   meta={"b": b, "num_classes": num_classes, "channels": list(channels),
                         "kernel": kernel, "hidden": hidden})


def build_model(spec: ModelSpec, phi) -> Network:
    opts = dict(spec.options)
    if spec.head == "autoencoder":
        return build_autoencoder(spec.b, phi, **opts)
    if spec.head == "reconnet":
        return build_reconnet(spec.b, phi, **opts)
    return build_classifier(spec.b, phi, spec.num_classes, **opts)


def _batch(x, b):
    x = np.asarray(x)
    return x[None] if x.shape == (b, b) else x


def reconstruct_block(model: Network, phi: MeasurementMatrix, x, r: int) -> np.ndarray:
    """Sense ``x`` (one block or a batch) with the first ``r`` rows and reconstruct."""
    b = model.input_shape[0]
    single = np.asarray(x).shape == (b, b)
    out, _ = forward_pass(model, phi.prefix(r), _batch(x, b))
    return out[0] if single else out


def classify_logits(model: Network, phi: MeasurementMatrix, x, r: int) -> np.ndarray:
    b = model.input_shape[0]
    single = np.asarray(x).shape == (b, b)
    out, _ = forward_pass(model, phi.prefix(r), _batch(x, b))
    return out[0] if single else out
