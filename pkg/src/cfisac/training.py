"""Teacher/student losses, lambda adaptation and the training loops.

Pipeline: train an SSNR teacher (beta=0) and a SINR teacher (beta=1), take
their training-set mean scores as ceilings, then train a student whose loss
normalizes both metrics by those ceilings and whose balance weight lambda
moves toward whichever metric lags its ceiling more.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataMismatchError, NumericError
from .metrics import batch_min_sinr, batch_ssnr
from .model import ArchitectureSpec, DistributedModel, init_model, predict_beams
from .scenario import Dataset, SystemConfig

log = logging.getLogger(__name__)

ROLES = ("ssnr-teacher", "sinr-teacher", "student")
CSV_COLUMNS = ("epoch", "train_g1", "train_g2", "val_g1", "val_g2", "loss", "lambda", "lr")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. ``max_epochs=None`` picks the role default
    (100 for the SSNR teacher, 1000 otherwise).

    ``student_val_lambda`` chooses the weight of the student's validation
    loss used for early stopping: "initial" scores every epoch at
    ``lambda0`` so scores stay comparable; "current" uses the live lambda.
    """

    max_epochs: int | None = None
    patience: int = 100
    batch_size: int = 500
    initial_lr: float = 0.01
    lr_decay_factor: float = 10.0
    lr_patience: int = 10
    lambda0: float = 0.5
    epsilon: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    init_seed: int = 0
    shuffle_seed: int = 0
    dtype: str = "float32"
    student_val_lambda: str = "initial"

    def __post_init__(self):
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1 or self.batch_size < 1 or self.lr_patience < 1:
            raise ConfigError("patience, batch_size and lr_patience must be >= 1")
        if not 0.0 <= self.lambda0 <= 1.0:
            raise ConfigError("lambda0 must lie in [0, 1]")
        if not self.initial_lr > 0 or not self.lr_decay_factor > 1:
            raise ConfigError("initial_lr must be > 0 and lr_decay_factor > 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.student_val_lambda not in ("initial", "current"):
            raise ConfigError("student_val_lambda must be 'initial' or 'current'")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    def epochs_for(self, role: str) -> int:
        if self.max_epochs is not None:
            return self.max_epochs
        return 100 if role == "ssnr-teacher" else 1000

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kw = dict(d)
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        return cls(**kw)


@dataclass(frozen=True)
class CeilingEstimates:
    g1_max: float
    g2_max: float

    def __post_init__(self):
        if not (self.g1_max > 0 and self.g2_max > 0):
            raise ConfigError(f"ceilings must be positive, got {self.g1_max}, {self.g2_max}")


@dataclass
class EpochStats:
    epoch: int
    train_g1: float
    train_g2: float
    val_g1: float
    val_g2: float
    loss: float
    lam: float
    lr: float


@dataclass
class TrainingRecord:
    role: str
    rows: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    lambda_steps: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        attr = "lam" if name == "lambda" else name
        return np.array([getattr(r, attr) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.epoch] + [repr(float(v)) for v in
                                    (r.train_g1, r.train_g2, r.val_g1, r.val_g2, r.loss, r.lam, r.lr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, role: str = "") -> "TrainingRecord":
        reader = csv.DictReader(io.StringIO(text))
        rows = [EpochStats(int(d["epoch"]), float(d["train_g1"]), float(d["train_g2"]),
                           float(d["val_g1"]), float(d["val_g2"]), float(d["loss"]),
                           float(d["lambda"]), float(d["lr"])) for d in reader]
        return cls(role=role, rows=rows)


# -- losses and lambda rule --------------------------------------------------

def teacher_loss(g1, g2, beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return -((1.0 - beta) * g1 + beta * g2)


def student_loss(g1, g2, ceilings: CeilingEstimates, lam: float):
    if not (ceilings.g1_max > 0 and ceilings.g2_max > 0):
        raise ConfigError("ceilings must be positive")
    return -((1.0 - lam) * g1 / ceilings.g1_max + lam * g2 / ceilings.g2_max)


def reference_gaps(g1, g2, ceilings: CeilingEstimates) -> tuple[float, float]:
    """Batch-mean normalized gaps (G1, G2) to the ceilings."""
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    G1 = float(np.mean((ceilings.g1_max - g1) / ceilings.g1_max))
    G2 = float(np.mean((ceilings.g2_max - g2) / ceilings.g2_max))
    return G1, G2


def lambda_step(lam: float, G1: float, G2: float, epsilon: float) -> float:
    lam = lam + epsilon * G2 if G2 >= G1 else lam - epsilon * G1
    return min(1.0, max(0.0, lam))


def update_lambda(lam: float, g1, g2, ceilings: CeilingEstimates, epsilon: float) -> float:
    G1, G2 = reference_gaps(g1, g2, ceilings)
    return lambda_step(lam, G1, G2, epsilon)


class PlateauScheduler:
    """Divide the learning rate by ``factor`` once the epoch loss has failed
    to improve on its best value for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, factor: float = 10.0, patience: int = 10):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return dict(lr=self.lr, best=self.best, bad_epochs=self.bad_epochs)


def lr_schedule_step(state: PlateauScheduler, epoch_loss: float) -> float:
    return state.step(epoch_loss)


def select_model(record: TrainingRecord | None = None, threshold_pct: float = 0.94, *,
                 val_g1: Sequence[float] | None = None, val_g2: Sequence[float] | None = None,
                 epochs: Sequence[int] | None = None,
                 epoch_range: tuple[int, int] | None = None) -> int:
    """Epoch with the highest validation SSNR among epochs whose validation
    min-SINR is at least ``threshold_pct`` of the best min-SINR.

    Either pass a record or the raw ``val_g1``/``val_g2`` curves; returns the
    epoch number (1-based unless ``epochs`` says otherwise).
    ``epoch_range`` (inclusive) restricts the search window.
    """
    if not 0.0 < threshold_pct <= 1.0:
        raise ConfigError("threshold_pct must lie in (0, 1]")
    if record is not None:
        val_g1, val_g2 = record.column("val_g1"), record.column("val_g2")
        epochs = [r.epoch for r in record.rows]
    g1 = np.asarray(val_g1, dtype=float)
    g2 = np.asarray(val_g2, dtype=float)
    if g1.size == 0 or g1.shape != g2.shape:
        raise ConfigError("need non-empty, equal-length curves")
    ep = np.arange(1, g1.size + 1) if epochs is None else np.asarray(epochs)
    window = np.ones(g1.size, dtype=bool)
    if epoch_range is not None:
        window = (ep >= epoch_range[0]) & (ep <= epoch_range[1])
        if not window.any():
            raise ConfigError(f"no epochs inside {epoch_range}")
    threshold = threshold_pct * g2[window].max()
    ok = window & (g2 >= threshold)
    cand = np.flatnonzero(ok)
    return int(ep[cand[np.argmax(g1[cand])]])


# -- evaluation ----------------------------------------------------------------

def scene_metrics(model: DistributedModel, dataset: Dataset, indices=None) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode per-scene (g1, g2) arrays."""
    H, A = dataset.channel_arrays(indices)
    if H.shape[0] == 0:
        return np.empty(0), np.empty(0)
    W = predict_beams(model, H, A)
    return metrics_of(W, H, A, dataset.config)


def metrics_of(W: np.ndarray, H: np.ndarray, A: np.ndarray, system: SystemConfig):
    Wt, Ht, At = (torch.as_tensor(x) for x in (W, H, A))
    g1 = batch_ssnr(At, Wt, system).numpy()
    g2 = batch_min_sinr(Ht, Wt, system.ue_noise_var).numpy()
    return g1, g2


def estimate_ceilings(ssnr_teacher: DistributedModel, sinr_teacher: DistributedModel,
                      dataset: Dataset) -> CeilingEstimates:
    """Mean teacher scores over the training split, computed once."""
    if ssnr_teacher.spec != sinr_teacher.spec or ssnr_teacher.system != sinr_teacher.system:
        raise DataMismatchError("teachers were built with different architecture or system config")
    if ssnr_teacher.system != dataset.config:
        raise DataMismatchError("teachers do not match the dataset's system config")
    idx = dataset.train_indices
    if idx.size == 0:
        raise ConfigError("training split is empty")
    g1, _ = scene_metrics(ssnr_teacher, dataset, idx)
    _, g2 = scene_metrics(sinr_teacher, dataset, idx)
    return CeilingEstimates(float(g1.mean()), float(g2.mean()))


# -- training loop ---------------------------------------------------------------

class _Objective:
    """Per-role loss, lambda state and early-stopping score."""

    def __init__(self, role: str, cfg: TrainConfig, beta: float | None = None,
                 ceilings: CeilingEstimates | None = None):
        self.role = role
        self.beta = beta
        self.ceilings = ceilings
        self.eps = cfg.epsilon
        self.lam = cfg.lambda0 if role == "student" else float("nan")
        self.val_lam = cfg.lambda0 if cfg.student_val_lambda == "initial" else None

    def loss(self, g1, g2):
        if self.role == "student":
            return student_loss(g1, g2, self.ceilings, self.lam)
        return teacher_loss(g1, g2, self.beta)

    def after_batch(self, g1: torch.Tensor, g2: torch.Tensor) -> None:
        if self.role == "student":
            # the loss stays in [-1, 0] only while batch scores sit below the ceilings
            value = float(self.loss(g1.mean().item(), g2.mean().item()))
            if value < -1.0:
                log.debug("student loss %.4f below -1: batch beats the teacher ceilings", value)
            self.lam = update_lambda(self.lam, g1.detach().cpu().numpy(), g2.detach().cpu().numpy(),
                                     self.ceilings, self.eps)

    def score(self, g1: float, g2: float) -> float:
        # larger is better
        if self.role == "ssnr-teacher":
            return g1
        if self.role == "sinr-teacher":
            return g2
        lam = self.lam if self.val_lam is None else self.val_lam
        return -float(student_loss(g1, g2, self.ceilings, lam))

    @property
    def early_stopping(self) -> bool:
        return self.role != "ssnr-teacher"


def _fit(dataset: Dataset, spec: ArchitectureSpec, system: SystemConfig, cfg: TrainConfig,
         objective: _Objective, model: DistributedModel | None = None):
    if len(dataset) == 0 or dataset.split == 0:
        raise ConfigError("training split is empty")
    if dataset.config != system:
        raise DataMismatchError("dataset was generated with a different system config")
    dtype = cfg.torch_dtype
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    if model is None:
        model = init_model(spec, system, cfg.init_seed, dtype=dtype)
    H_np, A_np = dataset.channel_arrays()
    H = torch.tensor(H_np, dtype=cdtype)
    A = torch.tensor(A_np, dtype=cdtype)
    train_idx, val_idx = dataset.train_indices, dataset.val_indices

    opt = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    sched = PlateauScheduler(cfg.initial_lr, cfg.lr_decay_factor, cfg.lr_patience)
    record = TrainingRecord(role=objective.role)
    best_score, best_state, since_best = -math.inf, None, 0
    max_epochs = cfg.epochs_for(objective.role)

    for epoch in range(1, max_epochs + 1):
        lr = sched.lr
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.shuffle_seed, epoch]))
        order = train_idx[rng.permutation(train_idx.size)]
        sums = np.zeros(3)
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            Hb, Ab = H[idx], A[idx]
            W = model(Hb, Ab)
            g1 = batch_ssnr(Ab, W, system)
            g2 = batch_min_sinr(Hb, W, system.ue_noise_var)
            loss = objective.loss(g1.mean(), g2.mean())
            if not torch.isfinite(loss):
                raise NumericError(f"{objective.role}: non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = idx.numel()
            sums += n * np.array([g1.mean().item(), g2.mean().item(), loss.item()])
            objective.after_batch(g1, g2)
            if objective.role == "student":
                record.lambda_steps.append(objective.lam)
        train_g1, train_g2, epoch_loss = sums / order.size

        if val_idx.size:
            v1, v2 = scene_metrics(model, dataset, val_idx)
            val_g1, val_g2 = float(v1.mean()), float(v2.mean())
        else:
            val_g1, val_g2 = train_g1, train_g2
        record.rows.append(EpochStats(epoch, train_g1, train_g2, val_g1, val_g2,
                                      epoch_loss, objective.lam, lr))
        log.info("%s epoch %d loss %.5f val g1 %.4f g2 %.4f lr %.1e", objective.role, epoch,
                 epoch_loss, val_g1, val_g2, lr)

        score = objective.score(val_g1, val_g2)
        if score > best_score:
            best_score, since_best = score, 0
            best_state = copy.deepcopy(model.state_dict())
            record.best_epoch = epoch
        else:
            since_best += 1
        sched.step(epoch_loss)
        if objective.early_stopping and since_best >= cfg.patience:
            record.stopped_early = True
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, record


def train_teacher(dataset: Dataset, spec: ArchitectureSpec, system: SystemConfig, beta: float,
                  config: TrainConfig = TrainConfig()):
    """Train the SSNR teacher (beta=0) or the SINR teacher (beta=1)."""
    if beta not in (0, 1):
        raise ConfigError("teacher beta must be exactly 0 (SSNR) or 1 (SINR)")
    role = "ssnr-teacher" if beta == 0 else "sinr-teacher"
    return _fit(dataset, spec, system, config, _Objective(role, config, beta=float(beta)))


def train_fixed_beta(dataset: Dataset, spec: ArchitectureSpec, system: SystemConfig, beta: float,
                     config: TrainConfig = TrainConfig()):
    """Diagnostic: train directly on the teacher loss at an intermediate beta."""
    obj = _Objective("sinr-teacher", config, beta=float(beta))
    obj.role = f"fixed-beta-{beta:g}"
    obj.score = lambda g1, g2: -float(teacher_loss(g1, g2, beta))
    return _fit(dataset, spec, system, config, obj)


def train_student(dataset: Dataset, spec: ArchitectureSpec, system: SystemConfig,
                  ceilings: CeilingEstimates, config: TrainConfig = TrainConfig()):
    return _fit(dataset, spec, system, config, _Objective("student", config, ceilings=ceilings))
