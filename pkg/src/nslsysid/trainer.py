"""Mini-batch Adam training and the normalised error metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .datagen import POINTS_PER_TRAJECTORY, Dataset
from .errors import InvalidArgumentError, NumericalFailureError
from .models import IdentModel, _Net, batch_loss, predict


@dataclass(frozen=True)
class TrainConfig:
    n_e: int
    batch_size: int | None = 256
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int | tuple = 0

    def __post_init__(self):
        if self.n_e < 1:
            raise InvalidArgumentError("n_e must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")

    def effective_batch_size(self, K: int) -> int:
        return K if self.batch_size is None else min(self.batch_size, K)


def steps_per_epoch(K: int, batch_size: int) -> int:
    return math.ceil(K / batch_size)


def _tensors(data: Dataset):
    return tuple(torch.from_numpy(np.ascontiguousarray(a)) for a in (data.X, data.U, data.Xdot, data.Y))


def train(
    model: IdentModel,
    data: Dataset,
    cfg: TrainConfig,
    callback: Callable[[int, int, float], None] | None = None,
) -> IdentModel:
    """Train for exactly ``cfg.n_e`` epochs of shuffled mini-batches.

    Returns a new model; the input model is left untouched.  ``callback`` is
    invoked after every optimiser step with ``(epoch, step, loss)``.
    """
    if data.K < 1:
        raise InvalidArgumentError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    net = _Net(model)
    opt = torch.optim.Adam(net.params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    X, U, Xdot, Y = _tensors(data)
    bs = cfg.effective_batch_size(data.K)
    step = 0
    for epoch in range(cfg.n_e):
        perm = torch.from_numpy(rng.permutation(data.K))
        for start in range(0, data.K, bs):
            idx = perm[start : start + bs]
            xdot_hat, y_hat = net.forward(X[idx], U[idx], create_graph=True)
            loss = batch_loss(xdot_hat, y_hat, Xdot[idx], Y[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericalFailureError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            if callback is not None:
                callback(epoch, step, value)
    theta = net.theta()
    if not np.all(np.isfinite(theta)):
        raise NumericalFailureError("non-finite parameters after training")
    return model.with_theta(theta)


def dataset_loss(model: IdentModel, data: Dataset) -> float:
    """Training loss over the whole dataset treated as one batch."""
    net = _Net(model, requires_grad=False)
    X, U, Xdot, Y = _tensors(data)
    with torch.enable_grad():
        xdot_hat, y_hat = net.forward(X, U, create_graph=False)
    return float(batch_loss(xdot_hat.detach(), y_hat.detach(), Xdot, Y))


def _check_metric_args(Xdot, Xdot_hat, sigma):
    Xdot = np.atleast_2d(np.asarray(Xdot, dtype=float))
    Xdot_hat = np.atleast_2d(np.asarray(Xdot_hat, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if Xdot.shape != Xdot_hat.shape:
        raise InvalidArgumentError(f"shape mismatch {Xdot.shape} vs {Xdot_hat.shape}")
    if sigma.shape != (Xdot.shape[1],):
        raise InvalidArgumentError("sigma must have one entry per state")
    if not np.all(sigma > 0):
        raise InvalidArgumentError("sigma must be positive")
    return Xdot, Xdot_hat, sigma


def nmae(Xdot, Xdot_hat, sigma) -> float:
    """Mean over samples of the sigma-normalised absolute error summed over states."""
    Xdot, Xdot_hat, sigma = _check_metric_args(Xdot, Xdot_hat, sigma)
    return float(np.sum(np.abs(Xdot - Xdot_hat) / sigma) / Xdot.shape[0])


def nmse(Xdot, Xdot_hat, sigma) -> float:
    Xdot, Xdot_hat, sigma = _check_metric_args(Xdot, Xdot_hat, sigma)
    return float(np.sum(((Xdot - Xdot_hat) / sigma) ** 2) / Xdot.shape[0])


def compute_flops(p: int, n_e: int, n_t: float) -> float:
    """Compute proxy: one flop per parameter per training sample per epoch."""
    return float(p * n_e * n_t * POINTS_PER_TRAJECTORY)


@dataclass(frozen=True)
class EvalReport:
    nmae: float
    nmse: float
    compute_flops: float
    param_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: IdentModel, val_data: Dataset, n_e: int, n_t: float) -> EvalReport:
    """Validation metrics, normalised by the validation set's derivative stds."""
    pred = predict(model, val_data.X, val_data.U)
    return EvalReport(
        nmae=nmae(val_data.Xdot, pred.xdot_hat, val_data.sigma),
        nmse=nmse(val_data.Xdot, pred.xdot_hat, val_data.sigma),
        compute_flops=compute_flops(model.param_count, n_e, n_t),
        param_count=model.param_count,
    )
