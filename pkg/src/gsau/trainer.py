"""Joint optimisation of the shared table and both encoders."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .autodiff import NumericError, Tensor
from .data import Dataset, make_batches, training_instances
from .evaluation import MetricsReport, evaluate
from .losses import LossBreakdown, LossConfig
from .model import GSAUModel

log = logging.getLogger(__name__)

VALID_METRIC_K = 20


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = params
        self.lr, self.eps = lr, eps
        self.beta1, self.beta2 = betas
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {n: g * (self.clip_norm / norm) for n, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for n, g in grads.items():
            p = self.params[n]
            m = self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            v = self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{n}": a for n, a in self.m.items()}
        out.update({f"opt/v/{n}": a for n, a in self.v.items()})
        out["opt/step"] = np.array(self.step_count, dtype=np.float32)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            for key, store in ((f"opt/m/{n}", self.m), (f"opt/v/{n}", self.v)):
                if key not in tensors:
                    raise ckpt.CheckpointError(f"checkpoint lacks {key}")
                if tensors[key].shape != p.shape:
                    raise ckpt.CheckpointError(f"dimension mismatch: {key} {tensors[key].shape} vs {p.shape}")
                store[n] = tensors[key].astype(p.dtype)
        self.step_count = int(tensors["opt/step"])


@dataclass
class TrainConfig:
    epochs: int = 300
    patience: int = 10
    batch_size: int = 1024
    lr: float = 1e-3
    seed: int = 2025
    clip_norm: float | None = None
    train_instances: str = "per-prefix"
    eval_head: str = "auto"
    eval_batch_size: int = 256
    eval_workers: int = 1
    log_every: int = 1


@dataclass
class TrainState:
    epoch: int = 0
    best_ndcg: float = -1.0
    best_epoch: int = 0
    since_best: int = 0

    def update(self, epoch: int, ndcg: float) -> bool:
        """Record an epoch's validation score; True when it is a new best."""
        self.epoch = epoch
        ndcg = float(np.float32(ndcg))  # checkpoints hold float32; keep resumed runs comparable
        if ndcg > self.best_ndcg:
            self.best_ndcg, self.best_epoch, self.since_best = ndcg, epoch, 0
            return True
        self.since_best += 1
        return False

    def should_stop(self, patience: int, max_epochs: int) -> bool:
        return self.since_best >= patience or self.epoch >= max_epochs

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "state/epoch": np.array(self.epoch, dtype=np.float32),
            "state/best_ndcg": np.array(self.best_ndcg, dtype=np.float32),
            "state/best_epoch": np.array(self.best_epoch, dtype=np.float32),
            "state/since_best": np.array(self.since_best, dtype=np.float32),
        }

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "TrainState":
        return cls(int(t["state/epoch"]), float(t["state/best_ndcg"]), int(t["state/best_epoch"]),
                   int(t["state/since_best"]))


def eval_head(loss_config: LossConfig, requested: str = "auto") -> tuple[str, bool]:
    """Scoring head and whether the sequence head uses cosine scores."""
    cosine = loss_config.variant == "gsau"
    if requested != "auto":
        return requested, cosine
    return ("graph" if loss_config.without_sequential else "sequential"), cosine


def train_step(model: GSAUModel, opt: Adam, batch, loss_config: LossConfig, rng=None) -> LossBreakdown:
    """One forward, backward and Adam update; returns the loss breakdown."""
    model.zero_grad()
    breakdown = model.losses(batch, loss_config, rng)
    values = breakdown.values()
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss: {values}")
    breakdown.total.backward()
    opt.step()
    return breakdown


def snapshot(model: GSAUModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.params.items()}


def save_checkpoint(path, model: GSAUModel, opt: Adam | None = None, state: TrainState | None = None,
                    best: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"param/{n}": p.data for n, p in model.params.items()}
    if opt is not None:
        tensors.update(opt.state())
    if state is not None:
        tensors.update(state.tensors())
    if best is not None:
        tensors.update({f"best/{n}": a for n, a in best.items()})
    ckpt.write_tensors(path, tensors)


def load_checkpoint(path, model: GSAUModel, opt: Adam | None = None, prefix: str = "param/"):
    """Restore parameters (and optimizer state when given); returns the raw tensor map."""
    tensors = ckpt.read_tensors(path)
    ckpt.load_into(model.params, tensors, prefix)
    if opt is not None:
        opt.load_state(tensors)
    return tensors


@dataclass
class FitResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_valid: float
    history: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def fit(
    dataset: Dataset,
    model: GSAUModel,
    loss_config: LossConfig,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
    resume: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> FitResult:
    """Train until the validation NDCG@20 stops improving for ``patience``
    epochs or ``epochs`` is reached; returns the best-on-validation parameters."""
    opt = Adam(model.params, lr=config.lr, clip_norm=config.clip_norm)
    state = TrainState()
    best = snapshot(model)
    if resume is not None:
        tensors = load_checkpoint(resume, model, opt)
        state = TrainState.from_tensors(tensors)
        best = {n: tensors[f"best/{n}"] for n in model.params} if "best/emb" in tensors else snapshot(model)

    instances = training_instances(dataset, config.train_instances)
    head, cosine = eval_head(loss_config, config.eval_head)
    history: list[dict] = []

    while not state.should_stop(config.patience, config.epochs):
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        totals = []
        batches = make_batches(dataset, config.batch_size, model.config.seq.max_seq_len,
                               epoch_seed(config.seed, epoch), instances=instances)
        for step, batch in enumerate(batches):
            rng = np.random.default_rng([config.seed, epoch, step])
            totals.append(train_step(model, opt, batch, loss_config, rng).values())
        report = evaluate(dataset, "valid", model.scorer(head, cosine), ks=(10, VALID_METRIC_K, 50),
                          batch_size=config.eval_batch_size, workers=config.eval_workers, epoch=epoch)
        improved = state.update(epoch, report.ndcg[VALID_METRIC_K])
        if improved:
            best = snapshot(model)
        record = {
            "epoch": epoch,
            "loss": {k: float(np.mean([t[k] for t in totals])) for k in totals[0]},
            "valid": report,
            "best_epoch": state.best_epoch,
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d loss %.4f valid N@20 %.4f (best %.4f @ %d)", epoch, record["loss"]["total"],
                     report.ndcg[VALID_METRIC_K], state.best_ndcg, state.best_epoch)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, state, best)

    return FitResult(best, state.best_epoch, state.best_ndcg, history, state)


def restore(model: GSAUModel, params: dict[str, np.ndarray]) -> None:
    for n, p in model.params.items():
        p.data = params[n].astype(p.dtype).copy()


def final_report(dataset: Dataset, model: GSAUModel, loss_config: LossConfig, config: TrainConfig,
                ks=(10, 20, 50), meta=None) -> MetricsReport:
    head, cosine = eval_head(loss_config, config.eval_head)
    return evaluate(dataset, "test", model.scorer(head, cosine), ks=ks,
                    batch_size=config.eval_batch_size, workers=config.eval_workers, meta=meta)

