"""Optimizer, learning-rate schedule and the shared training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient turns non-finite; carries the history so far."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass
class TrainingConfig:
    batch_size: int = 300
    iterations: int = 16000
    lr0: float = 1e-2
    period: int = 1000
    min_improvement: float = 0.05
    test_every: int = 100
    test_size: int = 1000
    final_test_size: int = 1500
    scaler_paths: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_steps: int = 100
    # fixed-point solver
    lam: float = 0.5
    n_inner: int = 10000
    fp_batch_size: int = 300
    seed: int = 0

    def to_json(self):
        return asdict(self)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class LrSchedule:
    """Halve the rate when the mean test loss of a period improves by less than a threshold."""

    def __init__(self, lr0, threshold=0.05):
        if lr0 <= 0:
            raise ValueError("lr0 must be positive")
        self.lr = float(lr0)
        self.lr0 = float(lr0)
        self.threshold = threshold
        self.prev_mean = None
        self.halvings = 0

    def end_period(self, period_mean):
        """Feed the mean test loss of the finished period; returns the new rate."""
        if self.prev_mean is not None:
            improvement = (self.prev_mean - period_mean) / self.prev_mean if self.prev_mean != 0 else 0.0
            if improvement < self.threshold:
                self.halvings += 1
                self.lr = self.lr0 * 0.5**self.halvings
        self.prev_mean = period_mean
        return self.lr


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (iteration, train loss, test loss, lr)
    best_test_loss: float = math.inf
    best_iteration: int = -1
    final_lr: float = 0.0
    iterations: int = 0


def fit(params, step_fn, test_fn, snapshot, restore, config, on_record=None):
    """Adam loop with test-loss cadence, rate halving per period and best snapshot.

    ``step_fn(it)`` returns (train loss, list of gradient arrays matching
    ``params``); ``test_fn()`` returns the test loss at the current parameters.
    On exit the parameters hold the best snapshot.
    """
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    sched = LrSchedule(config.lr0, config.min_improvement)
    res = TrainResult()
    best = None
    period_losses = []
    last_train = math.nan

    def record(it):
        nonlocal best
        test = float(test_fn())
        if not math.isfinite(test):
            raise TrainingDiverged(f"non-finite test loss at iteration {it}", res.history)
        res.history.append((it, last_train, test, sched.lr))
        if on_record is not None:
            on_record(res.history[-1])
        if test < res.best_test_loss:
            res.best_test_loss, res.best_iteration = test, it
            best = snapshot()
        return test

    for it in range(config.iterations):
        if it % config.test_every == 0:
            period_losses.append(record(it))
        loss, grads = step_fn(it)
        last_train = float(loss)
        if not math.isfinite(last_train) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {it}", res.history)
        opt.step(grads, sched.lr)
        if (it + 1) % config.period == 0:
            sched.end_period(float(np.mean(period_losses)))
            period_losses = []
    record(config.iterations)
    if best is not None:
        restore(best)
    res.final_lr = sched.lr
    res.iterations = config.iterations
    return res
