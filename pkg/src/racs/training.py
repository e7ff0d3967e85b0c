"""Three-stage rate-adaptive training and the single-rate baseline.

Stage 1 trains the measurement matrix and the head at the top rate.
Stage 2 freezes the head and retrains the first ``k_min`` rows alone.
Stage 3 appends the remaining rows one at a time, training only the newest
row while everything before it stays fixed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import BlockDataset
from .errors import NumericError, TrainingDiverged
from .models import ModelSpec, build_model
from .nn import LOSSES, AdamState, Network, Parameters, adam_step, backward_pass, forward_pass
from .sensing import MeasurementMatrix, gaussian_init

log = logging.getLogger(__name__)

ADAM_RESET_POLICIES = ("row", "stage")


@dataclass
class TrainConfig:
    k_min: int = 44
    m_max: int = 272
    max_iters_1: int = 300_000
    max_iters_2: int = 200_000
    iters_per_row: int = 500
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    val_every: int = 500
    # "row": fresh Adam moments for every stage and every appended row;
    # "stage": moments persist across rows within stage 3
    adam_reset: str = "row"
    divergence_patience: int = 10

    def __post_init__(self):
        if min(self.max_iters_1, self.max_iters_2, self.iters_per_row) < 0:
            raise ValueError("iteration counts must be non-negative")
        if not 1 <= self.k_min <= self.m_max:
            raise ValueError(f"need 1 <= k_min <= m_max, got {self.k_min}, {self.m_max}")
        if self.adam_reset not in ADAM_RESET_POLICIES:
            raise ValueError(f"adam_reset must be one of {ADAM_RESET_POLICIES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def total_iterations(self) -> int:
        return self.max_iters_1 + self.max_iters_2 + self.iters_per_row * (self.m_max - self.k_min)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)  # (stage, row, iteration, loss)
    steps: int = 0

    def add(self, stage, row, it, loss):
        self.records.append((stage, row, it, loss))


@dataclass
class TrainResult:
    phi: MeasurementMatrix
    model: Network
    log: TrainLog
    stage_phis: dict = field(default_factory=dict)


def _targets(data: BlockDataset, idx, loss_name):
    if loss_name == "cross-entropy":
        if data.labels is None:
            raise ValueError("classifier training needs a labelled dataset")
        return data.labels[idx]
    return data.blocks[idx]


def dataset_loss(model: Network, phi_prefix, data: BlockDataset, loss_name: str, chunk: int = 256) -> float:
    """Mean per-example loss over a whole dataset."""
    fn = LOSSES[loss_name]
    total = 0.0
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        out, _ = forward_pass(model, phi_prefix, data.blocks[idx])
        total += fn(out, _targets(data, idx, loss_name))[0] * len(idx)
    return total / len(data)


class _BestKeeper:
    """Tracks the lowest validation loss seen and a copy of the tensors that produced it."""

    def __init__(self, model, phi_rows, r, val, loss_name, tensors: dict):
        self.model, self.phi_rows, self.r = model, phi_rows, r
        self.val, self.loss_name, self.tensors = val, loss_name, tensors
        self.best = np.inf
        self.saved = None

    def check(self):
        if self.val is None or len(self.val) == 0:
            return
        try:
            loss = dataset_loss(self.model, self.phi_rows[: self.r], self.val, self.loss_name)
        except NumericError:
            loss = np.inf
        if loss < self.best:
            self.best = loss
            self.saved = {k: v.copy() for k, v in self.tensors.items()}

    def restore(self):
        if self.saved is None:
            return
        for k, v in self.saved.items():
            self.tensors[k][...] = v
        self.model.params.version += 1


def _optimize(model: Network, phi_rows: np.ndarray, r: int, row_lo: int, train_phi: bool,
              iters: int, data: BlockDataset, val, loss_name: str, cfg: TrainConfig,
              rng: np.random.Generator, tlog: TrainLog, stage: int, theta_state=None, phi_state=None):
    """Run ``iters`` Adam iterations on the unfrozen head tensors and rows ``row_lo:r``.

    ``phi_rows`` is updated in place; rows outside ``row_lo:r`` are never written.
    """
    loss_fn = LOSSES[loss_name]
    theta_names = model.params.trainable()
    theta_state = theta_state or AdamState(cfg.lr)
    phi_state = phi_state or AdamState(cfg.lr)
    phi_params = Parameters({"phi": phi_rows[row_lo:r]}) if train_phi else None

    watched = {k: model.params.tensors[k] for k in theta_names}
    if train_phi:
        watched["phi"] = phi_params.tensors["phi"]
    keeper = _BestKeeper(model, phi_rows, r, val, loss_name, watched)
    keeper.check()

    bad = 0
    for it in range(1, iters + 1):
        tlog.steps += 1
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        try:
            out, tape = forward_pass(model, phi_rows[:r], data.blocks[idx])
            loss, dout = loss_fn(out, _targets(data, idx, loss_name))
        except NumericError:
            loss = np.nan
        if not np.isfinite(loss):
            bad += 1
            if bad >= cfg.divergence_patience:
                raise TrainingDiverged(
                    f"stage {stage}: loss non-finite for {bad} consecutive steps",
                    last_good=Checkpoint(phi_rows, 1, model.params.snapshot(), stage),
                )
            continue
        bad = 0
        grads = backward_pass(model, tape, dout, phi_grad=train_phi)
        if theta_names:
            adam_step(model.params, grads, theta_state)
        if train_phi:
            adam_step(phi_params, {"phi": grads["phi"][row_lo:r]}, phi_state)
            model.params.version += 1  # tapes also capture the prefix
        tlog.add(stage, r if stage == 3 else 0, it, loss)
        if cfg.val_every and it % cfg.val_every == 0 and it != iters:
            keeper.check()
    if iters:
        keeper.check()
    keeper.restore()
    return phi_state


def _new_model(spec: ModelSpec, data: BlockDataset, m: int, cfg: TrainConfig, rng):
    n = data.b * data.b
    if spec.b != data.b:
        raise ValueError(f"model block side {spec.b} != dataset block side {data.b}")
    phi = gaussian_init(n, m, 1, rng)
    model = build_model(spec, phi).init(rng, np.float32)
    return phi, model


def train_vanilla(dataset: BlockDataset, spec: ModelSpec, m: int, cfg: TrainConfig, val=None,
                  rng=None, train_phi: bool = True, tlog: TrainLog | None = None) -> TrainResult:
    """Jointly train an ``m``-row matrix and the head at a single rate.

    With ``train_phi=False`` the Gaussian matrix stays fixed (random baseline).
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tlog = tlog if tlog is not None else TrainLog()
    phi, model = _new_model(spec, dataset, m, cfg, rng)
    model.params.unfreeze()
    _optimize(model, phi.rows, m, 0, train_phi, cfg.max_iters_1, dataset, val, spec.loss, cfg, rng, tlog, 1)
    return TrainResult(phi, model, tlog)


def stage1_train(dataset, spec, cfg, val=None, rng=None, tlog=None) -> TrainResult:
    """Train the base network at the top rate ``m_max / n``."""
    return train_vanilla(dataset, spec, cfg.m_max, cfg, val, rng, tlog=tlog)


def stage2_train(phi_full: MeasurementMatrix, model: Network, k_min: int, cfg: TrainConfig,
                 dataset, val=None, rng=None, loss_name=None, tlog=None) -> np.ndarray:
    """Retrain the first ``k_min`` rows with the head frozen; returns the new rows."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tlog = tlog if tlog is not None else TrainLog()
    loss_name = loss_name or ("cross-entropy" if model.head == "classifier" else "euclidean")
    phi_k = phi_full.rows[:k_min].copy()
    was_frozen = set(model.params.frozen)
    model.params.freeze()
    try:
        _optimize(model, phi_k, k_min, 0, True, cfg.max_iters_2, dataset, val, loss_name, cfg, rng, tlog, 2)
    finally:
        model.params.frozen = was_frozen
    return phi_k


def stage3_train(phi_k: np.ndarray, phi_full: MeasurementMatrix, model: Network, cfg: TrainConfig,
                 dataset, val=None, rng=None, loss_name=None, tlog=None, on_row=None) -> MeasurementMatrix:
    """Append rows ``k_min+1 .. m_max`` one at a time, training only the newest.

    Each appended row starts from the same row of the stage-1 matrix.
    ``on_row(r, rows_before, rows_after)`` is called after row ``r`` is trained
    with copies of rows ``1..r-1`` from before and after its training.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tlog = tlog if tlog is not None else TrainLog()
    loss_name = loss_name or ("cross-entropy" if model.head == "classifier" else "euclidean")
    k = phi_k.shape[0]
    rows = phi_full.rows.copy()
    rows[:k] = phi_k
    was_frozen = set(model.params.frozen)
    model.params.freeze()
    shared_state = AdamState(cfg.lr) if cfg.adam_reset == "stage" else None
    try:
        for r in range(k + 1, phi_full.m_max + 1):
            before = rows[: r - 1].copy() if on_row else None
            state = shared_state if shared_state is not None else AdamState(cfg.lr)
            _optimize(model, rows, r, r - 1, True, cfg.iters_per_row, dataset, val, loss_name, cfg,
                      rng, tlog, 3, phi_state=state)
            if on_row:
                on_row(r, before, rows[: r - 1].copy())
    finally:
        model.params.frozen = was_frozen
    return MeasurementMatrix(rows, k)


def make_checkpoint(phi_rows, k_min, model: Network, stage, cfg: TrainConfig, spec: ModelSpec, rng=None):
    config = json.loads(json.dumps({"train": cfg.to_dict(), "model": spec.to_dict()}))
    state = None
    if rng is not None:
        state = json.loads(json.dumps(rng.bit_generator.state))
    return Checkpoint(phi_rows, k_min, model.params.snapshot(), stage, config, state)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild ``(spec, cfg, phi, model)`` from a checkpoint."""
    spec = ModelSpec(**ckpt.config["model"])
    cfg = TrainConfig(**ckpt.config["train"])
    phi = MeasurementMatrix(ckpt.phi.copy(), ckpt.k_min)
    model = build_model(spec, phi)
    model.params = Parameters({k: v.copy() for k, v in ckpt.theta.items()})
    return spec, cfg, phi, model


def rng_from_checkpoint(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return rng


def run_rate_adaptive(dataset: BlockDataset, spec: ModelSpec, cfg: TrainConfig, val=None,
                      on_stage=None, on_row=None) -> TrainResult:
    """Stages 1-3 end to end.

    ``on_stage(stage, checkpoint)`` receives a checkpoint after stages 1 and
    2; the stage-2 checkpoint is enough to resume with :func:`resume_stage3`.
    """
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    base = stage1_train(dataset, spec, cfg, val, rng, tlog)
    phi_full, model = base.phi, base.model
    log.info("stage 1 done after %d steps", tlog.steps)
    if on_stage:
        on_stage(1, make_checkpoint(phi_full.rows, 1, model, 1, cfg, spec, rng))
    phi_k = stage2_train(phi_full, model, cfg.k_min, cfg, dataset, val, rng, spec.loss, tlog)
    log.info("stage 2 done after %d steps", tlog.steps)
    stage_phis = {1: phi_full.rows.copy(), 2: phi_k.copy()}
    if on_stage:
        combined = phi_full.rows.copy()
        combined[: cfg.k_min] = phi_k
        on_stage(2, make_checkpoint(combined, cfg.k_min, model, 2, cfg, spec, rng))
    phi_new = stage3_train(phi_k, phi_full, model, cfg, dataset, val, rng, spec.loss, tlog, on_row)
    log.info("stage 3 done after %d steps", tlog.steps)
    return TrainResult(phi_new, model, tlog, stage_phis)


def resume_stage3(ckpt: Checkpoint, dataset: BlockDataset, val=None, on_row=None) -> TrainResult:
    """Finish a run from a stage-2 checkpoint.

    The checkpoint's matrix holds the stage-2 rows followed by the stage-1
    rows that stage 3 starts from, so nothing else is needed.
    """
    if ckpt.stage != 2:
        raise ValueError(f"expected a stage-2 checkpoint, got stage {ckpt.stage}")
    spec, cfg, phi, model = model_from_checkpoint(ckpt)
    rng = rng_from_checkpoint(ckpt)
    tlog = TrainLog()
    full = MeasurementMatrix(phi.rows, 1)
    phi_new = stage3_train(phi.rows[: ckpt.k_min].copy(), full, model, cfg, dataset, val, rng,
                           spec.loss, tlog, on_row)
    return TrainResult(phi_new, model, tlog)
