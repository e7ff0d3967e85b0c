"""Metrics, block-wise image reconstruction, rate sweeps and report files."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import BlockDataset, assemble_image, extract_blocks, save_pgm
from .errors import DimensionError
from .nn import Network, forward_pass
from .sensing import MeasurementMatrix

MAX_PIXEL = 255.0


def psnr(reference, estimate) -> float:
    """PSNR in dB for images on the [0, 255] scale; ``math.inf`` when identical."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise DimensionError(f"shape mismatch {ref.shape} vs {est.shape}")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(MAX_PIXEL**2 / mse)


def psnr_unit(reference, estimate) -> float:
    """PSNR of [0, 1] images after mapping to [0, 255] and clamping the estimate."""
    ref = np.asarray(reference, dtype=np.float64) * MAX_PIXEL
    est = np.clip(np.asarray(estimate, dtype=np.float64) * MAX_PIXEL, 0.0, MAX_PIXEL)
    return psnr(ref, est)


def _batched_psnr(ref01, est01) -> np.ndarray:
    ref = ref01.reshape(len(ref01), -1).astype(np.float64) * MAX_PIXEL
    est = np.clip(est01.reshape(len(est01), -1).astype(np.float64) * MAX_PIXEL, 0.0, MAX_PIXEL)
    mse = np.mean((ref - est) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10.0 * np.log10(MAX_PIXEL**2 / np.where(mse == 0, 1.0, mse)))


def _run(model: Network, prefix, blocks, chunk=256) -> np.ndarray:
    outs = [forward_pass(model, prefix, blocks[i:i + chunk])[0] for i in range(0, len(blocks), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0,) + model.output_shape)


def reconstruct_image(model: Network, phi: MeasurementMatrix, image, r: int) -> np.ndarray:
    """Reconstruct a whole image from non-overlapping ``b x b`` blocks."""
    b = model.input_shape[0]
    blocks, layout = extract_blocks(image, b)
    out = _run(model, phi.prefix(r), blocks.blocks)
    return assemble_image(out.astype(np.float64), layout)


@dataclass
class SweepRecord:
    r: int
    mr: float
    mean_metric: float
    per_item: np.ndarray = field(repr=False, default=None)

    @property
    def n_items(self) -> int:
        return 0 if self.per_item is None else len(self.per_item)


@dataclass
class SweepReport:
    metric: str
    records: list[SweepRecord]
    model: str = ""
    dataset: str = ""

    def rs(self):
        return [rec.r for rec in self.records]

    def means(self):
        return np.array([rec.mean_metric for rec in self.records])

    def at(self, r: int) -> SweepRecord:
        for rec in self.records:
            if rec.r == r:
                return rec
        raise KeyError(r)


def classify_accuracy(model: Network, phi: MeasurementMatrix, labeled: BlockDataset, r: int) -> float:
    return float(np.mean(_item_metric(model, phi, labeled, r, "accuracy")))


def _item_metric(model, phi, data: BlockDataset, r, metric):
    if len(data) == 0:
        raise ValueError("empty dataset")
    out = _run(model, phi.prefix(r), data.blocks)
    if metric == "accuracy":
        if data.labels is None:
            raise ValueError("accuracy needs labels")
        return (np.argmax(out, axis=1) == data.labels).astype(np.float64)
    return _batched_psnr(data.blocks, out)


def _threads():
    try:
        return max(1, int(os.environ.get("RACS_THREADS", "1")))
    except ValueError:
        return 1


def sweep_rates(model: Network, phi: MeasurementMatrix, dataset: BlockDataset, r_list, metric=None,
                model_name="", dataset_name="") -> SweepReport:
    """Mean per-item PSNR (or accuracy for classifiers) at each prefix length."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    metric = metric or ("accuracy" if model.head == "classifier" else "psnr")
    r_list = sorted(set(int(r) for r in r_list))
    for r in r_list:
        phi.check_r(r)

    def one(r):
        items = _item_metric(model, phi, dataset, r, metric)
        return SweepRecord(r, phi.mr(r), float(np.mean(items)), items)

    workers = min(_threads(), len(r_list))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, r_list))
    else:
        records = [one(r) for r in r_list]
    return SweepReport(metric, records, model_name, dataset_name)


def _fmt(x) -> str:
    return f"{x:.6g}"


def write_csv(report: SweepReport, path):
    lines = ["r,mr,mean_metric,n_items"]
    for rec in report.records:
        lines.append(f"{rec.r},{_fmt(rec.mr)},{_fmt(rec.mean_metric)},{rec.n_items}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def export_phi_images(phi: MeasurementMatrix, directory, b: int | None = None) -> list[str]:
    """One PGM per row, reshaped to the block and stretched to [0, 255]."""
    os.makedirs(directory, exist_ok=True)
    b = b or int(round(math.sqrt(phi.n)))
    if b * b != phi.n:
        raise DimensionError(f"rows of length {phi.n} are not square blocks")
    paths = []
    width = max(4, len(str(phi.m_max)))
    for i, row in enumerate(np.asarray(phi.rows, dtype=np.float64)):
        lo, hi = row.min(), row.max()
        img = (row - lo) / (hi - lo) if hi > lo else np.full_like(row, 0.5)
        path = os.path.join(directory, f"phi_row_{i + 1:0{width}d}.pgm")
        save_pgm(img.reshape(b, b), path)
        paths.append(path)
    return paths
