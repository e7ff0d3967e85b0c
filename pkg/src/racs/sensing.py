"""Measurement matrix with row-prefix semantics, tied decoding and export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, RangeError, SingularityError
from .linalg import pinv_rows


@dataclass
class MeasurementMatrix:
    """An ``m_max x n`` sensing matrix usable at any prefix ``k_min <= r <= m_max``."""

    rows: np.ndarray
    k_min: int = 1
    trainable_rows: np.ndarray = field(default=None)

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise DimensionError(f"rows must be 2-D, got {self.rows.shape}")
        m_max, n = self.rows.shape
        if not 1 <= self.k_min <= m_max <= n:
            raise RangeError(f"need 1 <= k_min <= m_max <= n, got k_min={self.k_min}, m_max={m_max}, n={n}")
        if self.trainable_rows is None:
            self.trainable_rows = np.ones(m_max, dtype=bool)

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    @property
    def m_max(self) -> int:
        return self.rows.shape[0]

    def check_r(self, r: int) -> int:
        if not self.k_min <= r <= self.m_max:
            raise RangeError(f"prefix r={r} outside [{self.k_min}, {self.m_max}]")
        return int(r)

    def prefix(self, r: int) -> np.ndarray:
        """The first ``r`` rows, as a view."""
        return self.rows[: self.check_r(r)]

    def mr(self, r: int) -> float:
        return r / self.n

    def mr_range(self) -> tuple[float, float]:
        return self.k_min / self.n, self.m_max / self.n

    def copy(self) -> "MeasurementMatrix":
        return MeasurementMatrix(self.rows.copy(), self.k_min, self.trainable_rows.copy())


@dataclass(frozen=True)
class EncodedBlock:
    r: int
    values: np.ndarray


def gaussian_init(n: int, m_max: int, k_min: int, seed=None, dtype=np.float32) -> MeasurementMatrix:
    """I.i.d. N(0, 1/n) entries. ``seed`` may be an int or a numpy Generator."""
    if not 1 <= k_min <= m_max <= n:
        raise RangeError(f"need 1 <= k_min <= m_max <= n, got {k_min}, {m_max}, {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = (rng.standard_normal((m_max, n)) / np.sqrt(n)).astype(dtype)
    return MeasurementMatrix(rows, k_min)


def measure(phi: MeasurementMatrix, x, r: int) -> EncodedBlock:
    x = np.asarray(x).reshape(-1)
    if x.shape[0] != phi.n:
        raise DimensionError(f"block has {x.shape[0]} pixels, matrix expects {phi.n}")
    # row-wise reduction so a prefix reproduces the leading entries bitwise
    return EncodedBlock(r, np.sum(phi.prefix(r) * x.astype(phi.rows.dtype, copy=False), axis=1))


def decode_init(phi: MeasurementMatrix, y: EncodedBlock, shape=None) -> np.ndarray:
    """Pseudo-image ``Psi_r y``; reshaped to ``shape`` (default: square block)."""
    rows = phi.prefix(y.r)
    values = np.asarray(y.values).reshape(-1)
    if values.shape[0] != y.r:
        raise DimensionError(f"{values.shape[0]} measurements for prefix {y.r}")
    out = pinv_rows(rows).psi @ values.astype(np.float64)
    if shape is None:
        side = int(round(np.sqrt(phi.n)))
        shape = (side, side) if side * side == phi.n else (phi.n,)
    return out.reshape(shape)


def quantize_export(phi: MeasurementMatrix, r: int | None = None):
    """9-bit signed integer version of the prefix, scaled by the matrix's max magnitude.

    Returns ``(q, scale)`` with ``q * scale`` approximating the rows and
    ``q`` in ``[-256, 255]``.
    """
    rows = np.asarray(phi.rows if r is None else phi.prefix(r), dtype=np.float64)
    peak = float(np.max(np.abs(rows)))
    if peak == 0.0:
        raise SingularityError("cannot normalize an all-zero measurement matrix")
    q = np.clip(np.rint(rows / peak * 255.0), -256, 255).astype(np.int16)
    return q, peak / 255.0


def dequantize(q, scale) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * scale
