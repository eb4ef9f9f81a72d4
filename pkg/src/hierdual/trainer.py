"""Lookup-table dual encoders trained with in-batch softmax and SGD with momentum."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Callable, Optional, Sequence, TextIO

import numpy as np

from .construct import EmbeddingTable
from .evaluation import EvalReport, recall_at_relevant
from .hierarchy import Hierarchy
from .sampler import PairBatch, SamplingKind, SamplingStrategy

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 20.0
FINETUNE_LR_MULTIPLIER = 1e-3
FINETUNE_TEMPERATURE = 500.0


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int = -1, phase: int = -1):
        super().__init__(message)
        self.step = step
        self.phase = phase


@dataclass
class DualEncoderParams:
    """Query and document lookup tables. Rows are raw (unconstrained) parameters."""

    query_table: EmbeddingTable
    doc_table: EmbeddingTable
    normalize: bool = True

    def __post_init__(self):
        if self.query_table.dim != self.doc_table.dim:
            raise ValueError("query and document tables must share a dimension")

    @classmethod
    def initialize(cls, n: int, m: int, dim: int, seed=None, normalize: bool = True, std: float = 1.0):
        rng = np.random.default_rng(seed)
        q = rng.normal(0.0, std, size=(n, dim))
        x = rng.normal(0.0, std, size=(m, dim))
        return cls(EmbeddingTable(q), EmbeddingTable(x), normalize)

    @property
    def dim(self) -> int:
        return self.query_table.dim

    def query_embeddings(self) -> np.ndarray:
        q = self.query_table.vectors
        return q / np.linalg.norm(q, axis=1, keepdims=True) if self.normalize else q

    def doc_embeddings(self) -> np.ndarray:
        x = self.doc_table.vectors
        return x / np.linalg.norm(x, axis=1, keepdims=True) if self.normalize else x

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(self.query_table.copy(), self.doc_table.copy(), self.normalize)

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.query_table.vectors)) and np.all(np.isfinite(self.doc_table.vectors))):
            raise ValueError("non-finite parameter entries")


@dataclass
class PhaseConfig:
    steps: int
    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 128
    temperature: float = DEFAULT_TEMPERATURE
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)
    eval_every: int = 250
    early_stop_metric: str = "overall_recall"
    # checkpoints whose distance-0 recall falls below this are never kept as best
    exact_match_floor: Optional[float] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.early_stop_metric not in ("overall_recall", "min_slice_recall"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        if self.exact_match_floor is not None and not 0 <= self.exact_match_floor <= 1:
            raise ValueError("exact_match_floor must lie in [0, 1]")


def pretrain_finetune_phases(
    steps: int,
    finetune_steps: int,
    learning_rate: float,
    batch_size: int,
    heavy: SamplingKind = SamplingKind.HEAVY_TAIL_TOY,
    lr_multiplier: float = FINETUNE_LR_MULTIPLIER,
    finetune_temperature: float = FINETUNE_TEMPERATURE,
    temperature: float = DEFAULT_TEMPERATURE,
    momentum: float = 0.9,
    eval_every: int = 250,
    exact_match_floor: Optional[float] = None,
) -> list[PhaseConfig]:
    """Regular-sampling pretraining followed by long-distance-only finetuning.

    ``exact_match_floor`` applies to the finetuning phase only.
    """
    pre = PhaseConfig(steps, learning_rate, momentum, batch_size, temperature, SamplingStrategy(), eval_every)
    fine = PhaseConfig(
        finetune_steps,
        learning_rate * lr_multiplier,
        momentum,
        batch_size,
        finetune_temperature,
        SamplingStrategy(SamplingKind(heavy)),
        eval_every,
        exact_match_floor=exact_match_floor,
    )
    return [pre, fine]


@dataclass
class Checkpoint:
    params: DualEncoderParams
    step: int
    validation_report: EvalReport
    phase: int = 0

    def write(self, stream: BinaryIO, meta: Optional[dict] = None) -> None:
        """Magic, JSON metadata block, then the query and document tables."""
        block = dict(meta or {})
        block.update(
            step=self.step,
            phase=self.phase,
            normalize=self.params.normalize,
            validation=self.validation_report.as_dict(),
        )
        payload = json.dumps(block, sort_keys=True).encode()
        stream.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(payload)) + payload)
        self.params.query_table.write(stream)
        self.params.doc_table.write(stream)

    @classmethod
    def read(cls, stream: BinaryIO) -> tuple["Checkpoint", dict]:
        if stream.read(8) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (size,) = struct.unpack("<Q", stream.read(8))
        meta = json.loads(stream.read(size))
        q = EmbeddingTable.read(stream)
        x = EmbeddingTable.read(stream)
        v = meta["validation"]
        report = EvalReport(
            overall_recall=v["overall_recall"],
            per_distance_recall={int(d): (s["recall"], s["pairs"]) for d, s in v["per_distance_recall"].items()},
            min_slice_recall=v["min_slice_recall"],
            dimension=v["dimension"],
            step=v["step"],
            seed=v["seed"],
            phase=v.get("phase"),
        )
        params = DualEncoderParams(q, x, meta["normalize"])
        return cls(params, meta["step"], report, meta["phase"]), meta


CHECKPOINT_MAGIC = b"HRCKPT01"


def _unit(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / norms, norms


def _grouped_softmax(a: np.ndarray, q_inv, x_inv, x_counts, n: int) -> tuple[float, np.ndarray]:
    """In-batch softmax over unique query rows and unique document columns.

    ``a`` holds scaled scores between unique batch queries and unique batch
    documents. A document occurring ``c`` times contributes ``c`` identical
    candidates, so weighting its column by ``c`` reproduces the plain N x N loss
    exactly. Returns the loss and its gradient w.r.t. ``a``.
    """
    shifted = a - a.max(axis=1, keepdims=True)
    w = np.exp(shifted) * x_counts[None, :]
    z = w.sum(axis=1)
    lse = np.log(z) + a.max(axis=1)
    value = float(np.mean(lse[q_inv] - a[q_inv, x_inv]))
    q_counts = np.bincount(q_inv, minlength=a.shape[0]).astype(np.float64)
    grad = (w / z[:, None]) * q_counts[:, None]
    np.subtract.at(grad, (q_inv, x_inv), 1.0)
    return value, grad / n


def batch_loss_and_row_grads(params: DualEncoderParams, batch: PairBatch, temperature: float):
    """Loss plus gradients w.r.t. the raw table rows touched by the batch.

    Returns ``(loss, (q_rows, dq), (x_rows, dx))`` where ``q_rows``/``x_rows``
    are the unique query/document indices of the batch.
    """
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if len(batch) == 0:
        raise ValueError("empty batch")
    params.check_finite()
    q_rows, q_inv = np.unique(batch.queries, return_inverse=True)
    x_rows, x_inv, x_counts = np.unique(batch.documents, return_inverse=True, return_counts=True)
    qr = params.query_table.vectors[q_rows]
    xr = params.doc_table.vectors[x_rows]
    if params.normalize:
        u, qn = _unit(qr)
        v, xn = _unit(xr)
    else:
        u, v = qr, xr
    value, g = _grouped_softmax((u @ v.T) / temperature, q_inv, x_inv, x_counts.astype(np.float64), len(batch))
    du = g @ v / temperature
    dv = g.T @ u / temperature
    if params.normalize:
        du = (du - u * np.sum(du * u, axis=1, keepdims=True)) / qn
        dv = (dv - v * np.sum(dv * v, axis=1, keepdims=True)) / xn
    return value, (q_rows, du), (x_rows, dv)


def loss(params: DualEncoderParams, batch: PairBatch, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Mean in-batch softmax cross-entropy; each query's candidates are all batch documents."""
    value, _, _ = batch_loss_and_row_grads(params, batch, temperature)
    return value


def loss_gradients(
    params: DualEncoderParams, batch: PairBatch, temperature: float = DEFAULT_TEMPERATURE
) -> tuple[np.ndarray, np.ndarray]:
    """Dense gradient tables for the query and document parameters; untouched rows are zero."""
    _, (q_rows, du), (x_rows, dv) = batch_loss_and_row_grads(params, batch, temperature)
    gq = np.zeros_like(params.query_table.vectors)
    gx = np.zeros_like(params.doc_table.vectors)
    gq[q_rows] = du
    gx[x_rows] = dv
    return gq, gx


class MomentumSGD:
    """Heavy-ball momentum: ``v <- mu * v + g``; ``theta <- theta - lr * v``."""

    def __init__(self, params: DualEncoderParams, learning_rate: float, momentum: float):
        self.params = params
        self.lr = learning_rate
        self.mu = momentum
        self.vq = np.zeros_like(params.query_table.vectors)
        self.vx = np.zeros_like(params.doc_table.vectors)

    def step(self, q_grad, x_grad) -> None:
        """Apply row gradients given as ``(rows, values)`` with unique rows."""
        with np.errstate(over="ignore", invalid="ignore"):
            self._step(q_grad, x_grad)

    def _step(self, q_grad, x_grad) -> None:
        self.vq *= self.mu
        self.vx *= self.mu
        self.vq[q_grad[0]] += q_grad[1]
        self.vx[x_grad[0]] += x_grad[1]
        self.params.query_table.vectors -= self.lr * self.vq
        self.params.doc_table.vectors -= self.lr * self.vx


def _improves(report: EvalReport, best: EvalReport, phase: PhaseConfig) -> bool:
    exact = report.per_distance_recall.get(0)
    if phase.exact_match_floor is not None and exact is not None and exact[0] < phase.exact_match_floor:
        return False
    return getattr(report, phase.early_stop_metric) > getattr(best, phase.early_stop_metric)


def train(
    h: Hierarchy,
    dim: int,
    phases: Sequence[PhaseConfig],
    validation: PairBatch,
    seed: int = 0,
    normalize: bool = True,
    init_std: float = 1.0,
    on_eval: Optional[Callable[[EvalReport], None]] = None,
) -> tuple[Checkpoint, list[EvalReport]]:
    """Run the phases in order and return the best checkpoint of the last phase plus the eval history.

    Seeds: ``SeedSequence(seed).spawn(1 + len(phases))``; child 0 initializes
    the tables, child ``i`` drives the sampler of phase ``i``. Each phase
    starts from the previous phase's best checkpoint with fresh momentum; the
    starting state counts as a candidate for the phase's best.
    """
    if not phases:
        raise ValueError("at least one phase is required")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    children = np.random.SeedSequence(seed).spawn(1 + len(phases))
    params = DualEncoderParams.initialize(h.node_count, h.node_count, dim, children[0], normalize, init_std)

    def evaluate(p: DualEncoderParams, step: int, phase: int, train_loss=None) -> EvalReport:
        report = recall_at_relevant(p, h, validation, step=step, seed=seed)
        report.phase = phase
        report.train_loss = train_loss
        history.append(report)
        if on_eval is not None:
            on_eval(report)
        return report

    history: list[EvalReport] = []
    best = Checkpoint(params.copy(), 0, evaluate(params, 0, 0), phase=0)
    step = 0
    for pi, phase in enumerate(phases):
        rng = np.random.default_rng(children[pi + 1])
        params = best.params.copy()
        opt = MomentumSGD(params, phase.learning_rate, phase.momentum)
        for local in range(1, phase.steps + 1):
            batch = phase.strategy.sample(h, phase.batch_size, rng)
            value, q_grad, x_grad = batch_loss_and_row_grads(params, batch, phase.temperature)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step + local} in phase {pi}", step + local, pi)
            opt.step(q_grad, x_grad)
            if not (np.all(np.isfinite(params.query_table.vectors)) and np.all(np.isfinite(params.doc_table.vectors))):
                raise TrainingError(f"non-finite update at step {step + local} in phase {pi}", step + local, pi)
            if local % phase.eval_every == 0 or local == phase.steps:
                report = evaluate(params, step + local, pi, value)
                if _improves(report, best.validation_report, phase):
                    best = Checkpoint(params.copy(), step + local, report, phase=pi)
        step += phase.steps
        log.info(
            "phase %d done at step %d: best step %d overall %.4f",
            pi, step, best.step, best.validation_report.overall_recall,
        )
    return best, history


def write_training_log(history: Sequence[EvalReport], stream: TextIO, max_distance: Optional[int] = None) -> None:
    """CSV with step, phase, loss, overall_recall, recall_d0..recall_dK."""
    if max_distance is None:
        max_distance = max((max(r.per_distance_recall) for r in history if r.per_distance_recall), default=0)
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["step", "phase", "loss", "overall_recall"] + [f"recall_d{d}" for d in range(max_distance + 1)])
    for r in history:
        loss_value = getattr(r, "train_loss", None)
        row = [r.step, r.phase, "" if loss_value is None else f"{loss_value:.8f}", f"{r.overall_recall:.6f}"]
        for d in range(max_distance + 1):
            row.append(f"{r.per_distance_recall[d][0]:.6f}" if d in r.per_distance_recall else "")
        w.writerow(row)


def config_hash(phases: Sequence[PhaseConfig], extra: Optional[dict] = None) -> str:
    blob = json.dumps([asdict(p) for p in phases] + [extra or {}], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
